"""Regenerates beta_oracle.txt and special_oracle.txt with 50-digit mpmath.

Run from this directory: python3 gen_beta_oracle.py
"""
import mpmath as mp

mp.mp.dps = 50
SHAPES = ["0.5", "0.6", "1", "2", "5", "20", "100"]


def fmt(x):
    return mp.nstr(x, 20, min_fixed=-1, max_fixed=-1)


with open("beta_oracle.txt", "w") as f:
    f.write("# alpha beta y log_pdf cdf mean variance\n")
    for a_s in SHAPES:
        for b_s in SHAPES:
            a, b = mp.mpf(a_s), mp.mpf(b_s)
            lb = mp.log(mp.beta(a, b))
            mean = a / (a + b)
            var = a * b / ((a + b) ** 2 * (a + b + 1))
            for k in range(1, 100):
                y = mp.mpf(k) / 100
                lp = (a - 1) * mp.log(y) + (b - 1) * mp.log(1 - y) - lb
                c = mp.betainc(a, b, 0, y, regularized=True)
                f.write(f"{a_s} {b_s} {k / 100} {fmt(lp)} {fmt(c)} {fmt(mean)} {fmt(var)}\n")

with open("special_oracle.txt", "w") as f:
    f.write("# x lgamma digamma\n")
    xs = ["0.5", "0.6", "0.75", "1", "1.5", "2", "2.5", "3.7", "5.9", "6", "10.25",
          "33.3", "100", "1000.5", "12345.678", "100000", "999999.5", "1000000"]
    for x_s in xs:
        x = mp.mpf(x_s)
        f.write(f"{x_s} {fmt(mp.loggamma(x))} {fmt(mp.digamma(x))}\n")
