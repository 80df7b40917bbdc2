"""Plot a ``training_log.csv`` written by ``mfac train``.

    mfac train src/mfac/configs/sysrisk.toml --out run
    python3 demos/plot_training.py run/training_log.csv -o training.png

Needs matplotlib, which the package itself does not depend on.  Draws the
actor weights, the critic coefficients and the estimated objective against
the iteration count, with the Riccati targets dashed when the log has them.
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit(f"{path} has no iterations")
    return {key: [float(r[key]) for r in rows] for key in rows[0]}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("log")
    parser.add_argument("-o", "--output", default="training.png")
    args = parser.parse_args()
    cols = read_log(args.log)
    it = cols["iteration"]

    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for prefix, ax, title in (("omega", axes[0], "actor weights"), ("theta", axes[1], "critic coefficients")):
        names = sorted(k for k in cols if k.startswith(prefix + "_") and "star" not in k)
        for name in names:
            (line,) = ax.plot(it, cols[name], label=name)
            ref = name.replace(prefix, prefix + "_star")
            if ref in cols:
                ax.axhline(cols[ref][0], ls="--", color=line.get_color(), lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=8)
    axes[2].plot(it, cols["J_hat"])
    axes[2].set_title("estimated objective")
    axes[2].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
