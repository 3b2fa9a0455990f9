#!/usr/bin/env python3
"""Reference PSNR/SSIM values for two fixed 8x8 images.

The images are generated by closed-form expressions that the Rust test
reproduces verbatim. SSIM follows the windowed-statistics definition used
by the library: Gaussian window (shrunk to 7x7 for an 8x8 image, sigma
1.5, normalized), population covariance, stability constants
C1=(0.01*255)^2 and C2=(0.03*255)^2, averaged over fully interior window
positions. A cross-check against scikit-image is printed alongside.
"""

import numpy as np


def fixed_images():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    for r in range(8):
        for c in range(8):
            a[r, c] = 100.0 + 80.0 * np.sin(0.7 * r + 0.3 * c)
            b[r, c] = a[r, c] + 12.0 * np.cos(1.1 * r - 0.5 * c)
    return a, b


def gaussian_window(size, sigma):
    center = (size - 1) / 2.0
    rr, cc = np.mgrid[0:size, 0:size]
    w = np.exp(-((rr - center) ** 2 + (cc - center) ** 2) / (2 * sigma * sigma))
    return w / w.sum()


def ssim_direct(a, b, peak=255.0):
    h, w = a.shape
    win = min(11, min(h, w))
    if win % 2 == 0:
        win -= 1
    g = gaussian_window(win, 1.5)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for r0 in range(h - win + 1):
        for c0 in range(w - win + 1):
            x = a[r0 : r0 + win, c0 : c0 + win]
            y = b[r0 : r0 + win, c0 : c0 + win]
            ux = (g * x).sum()
            uy = (g * y).sum()
            vx = (g * x * x).sum() - ux * ux
            vy = (g * y * y).sum() - uy * uy
            cov = (g * x * y).sum() - ux * uy
            vals.append(
                ((2 * ux * uy + c1) * (2 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


def psnr_direct(a, b, peak=255.0):
    mse = float(np.mean((a - b) ** 2))
    return 10.0 * np.log10(peak * peak / mse)


def main():
    a, b = fixed_images()
    print(f"mse       = {float(np.mean((a - b) ** 2)):.17g}")
    print(f"psnr_db   = {psnr_direct(a, b):.17g}")
    print(f"ssim      = {ssim_direct(a, b):.17g}")
    print(f"ssim_self = {ssim_direct(a, a):.17g}")
    try:
        from skimage.metrics import structural_similarity

        sk = structural_similarity(
            a,
            b,
            win_size=7,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255.0,
        )
        print(f"ssim_skimage = {sk:.17g}  (cross-check only)")
    except ImportError:
        print("scikit-image unavailable; direct formula only")


if __name__ == "__main__":
    main()
