#!/usr/bin/env python3
"""Reference Gaussian-smoothed values via scipy.

Applies two separable correlate1d passes with the sampled, normalized
Gaussian kernel (sigma = 0.3*((w-1)*0.5-1)+0.8) and half-sample reflect
borders to a fixed 1x6x6 image, for windows 3 and 5. Also prints the
kernels and the nearest-rank percentiles of a fixed count multiset for
the detector-threshold check.
"""

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import chi2


def kernel(window):
    sigma = 0.3 * ((window - 1) * 0.5 - 1) + 0.8
    radius = window // 2
    k = np.exp(-np.arange(-radius, radius + 1) ** 2 / (2 * sigma * sigma))
    return k / k.sum()


def fixed_image():
    img = np.zeros((6, 6))
    for r in range(6):
        for c in range(6):
            img[r, c] = np.sin(0.9 * r) * 1.3 + np.cos(0.6 * c) - 0.2 * r * c / 10.0
    return img


def main():
    img = fixed_image()
    for window in (3, 5):
        k = kernel(window)
        print(f"kernel[{window}] = [" + ", ".join(f"{v:.17g}" for v in k) + "]")
        rows = correlate1d(img, k, axis=1, mode="reflect")
        out = correlate1d(rows, k, axis=0, mode="reflect")
        print(f"smoothed[window={window}]:")
        for row in out:
            print(", ".join(f"{v:.17g}" for v in row) + ",")

    counts = [4, 17, 0, 9, 3, 12, 7, 7, 1, 22, 5, 2, 14, 6, 3, 11, 8, 0, 19, 4, 10, 2, 6]
    for pct in (10.0, 50.0, 90.0, 100.0):
        v = np.percentile(counts, pct, method="inverted_cdf")
        print(f"percentile[{pct}] of counts = {int(v)}")

    print(f"chi2 critical df=8 alpha=0.01 = {chi2.ppf(0.99, 8):.17g}")


if __name__ == "__main__":
    main()
