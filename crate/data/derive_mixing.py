"""Derive the bundled 4-bin x 3-material mixing matrix.

Mass attenuation coefficients (cm^2/g, total with coherent scattering) are an
approximate transcription of the NIST XCOM / Hubbell-Seltzer tables for liquid
water (soft-tissue surrogate), ICRU-44 cortical bone and elemental iodine.
Each bin value is the mean of the log-log interpolated curve over the bin with
a flat in-bin weighting, multiplied by the material density. The iodine K edge
(33.1694 keV) is handled by interpolating separately on each side of the edge.

Usage: python3 derive_mixing.py > mixing_4bin.toml
"""

import numpy as np

WATER = (1.00, [(10, 5.329), (15, 1.673), (20, 0.8096), (30, 0.3756),
                (40, 0.2683), (50, 0.2269), (60, 0.2059)])
BONE = (1.92, [(10, 28.51), (15, 9.032), (20, 4.001), (30, 1.331),
               (40, 0.6655), (50, 0.4242), (60, 0.3148)])
K_EDGE = 33.1694
IODINE = (4.93, [(10, 162.1), (15, 54.67), (20, 25.86), (30, 8.616),
                 (K_EDGE, 6.551), (K_EDGE, 35.83), (40, 22.10), (50, 12.32),
                 (60, 7.579)])
BIN_EDGES = [16.0, 22.0, 25.0, 28.0, 50.0]


def mu_rho(table, e):
    # choose the branch of a duplicated edge energy by side
    pts = table
    for (e0, v0), (e1, v1) in zip(pts, pts[1:]):
        if e0 == e1:
            continue
        if e0 <= e < e1 or (e == e1 and e1 == pts[-1][0]):
            t = (np.log(e) - np.log(e0)) / (np.log(e1) - np.log(e0))
            return float(np.exp(np.log(v0) + t * (np.log(v1) - np.log(v0))))
    raise ValueError(e)


def bin_mean(material, lo, hi, samples=20000):
    rho, table = material
    es = lo + (np.arange(samples) + 0.5) * (hi - lo) / samples
    return rho * float(np.mean([mu_rho(table, e) for e in es]))


def main():
    names = ["bone", "soft_tissue", "iodine"]
    mats = [BONE, WATER, IODINE]
    print("# Bin-averaged linear attenuation (cm^-1), rows = bins, cols = materials.")
    print("# Generated by data/derive_mixing.py; see that script for provenance.")
    print("bin_edges_kev = [%s]" % ", ".join("%.1f" % e for e in BIN_EDGES))
    print("materials = [%s]" % ", ".join('"%s"' % n for n in names))
    print("mixing = [")
    for lo, hi in zip(BIN_EDGES, BIN_EDGES[1:]):
        row = [bin_mean(m, lo, hi) for m in mats]
        print("    [%s]," % ", ".join("%.6f" % v for v in row))
    print("]")


if __name__ == "__main__":
    main()
