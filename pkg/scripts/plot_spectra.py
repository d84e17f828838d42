"""Plot per-adapter power spectra of a checkpoint, optionally against a reference.

    python3 scripts/plot_spectra.py runs/mechanism/seed_0/lambda_0.02/adapters.slra \
        --reference runs/mechanism/seed_0/lambda_0/adapters.slra --out spectra.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from spectral_lora import experiments as E  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint")
    ap.add_argument("--reference")
    ap.add_argument("--matrices", type=int, default=6, help="how many adapter matrices to draw")
    ap.add_argument("--out", default="spectra.png")
    args = ap.parse_args()

    rows = [r for r in E.spectrum_report(args.checkpoint) if not r.untrained][: args.matrices]
    ref = {}
    if args.reference:
        ref = {r.matrix: r for r in E.spectrum_report(args.reference) if not r.untrained}
    fig, axes = plt.subplots(len(rows), 1, figsize=(7, 2.2 * len(rows)), squeeze=False)
    for ax, r in zip(axes[:, 0], rows):
        freq = np.arange(len(r.power)) / r.n
        ax.semilogy(freq, r.power + 1e-30, lw=0.8, label="checkpoint")
        if r.matrix in ref:
            ax.semilogy(freq, ref[r.matrix].power + 1e-30, lw=0.8, alpha=0.7, label="reference")
        ax.set_title(f"{r.matrix}  hf_frac {r.high_freq_fraction:.4f}", fontsize=9)
        ax.set_ylabel("power")
    axes[-1, 0].set_xlabel("k / n")
    axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
