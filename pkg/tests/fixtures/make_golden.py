"""Regenerate golden.json with mpmath at 30 digits.

Schema (version 1)::

    {"schema": "fbsdelab-golden", "version": 1,
     "values": {name: {"value": "<decimal string>", "digits": int, "method": str, "args": {...}}}}

Values are stored as strings so no precision is lost in JSON.
"""

import json
from pathlib import Path

import mpmath as mp

mp.mp.dps = 30


def covariance(H, s, t):
    H, s, t = mp.mpf(H), mp.mpf(s), mp.mpf(t)
    return (t ** (2 * H) + s ** (2 * H) - abs(t - s) ** (2 * H)) / 2


def iota_linear_sigma(H, t):
    # C_H * int_0^t int_0^t u v |u - v|^(2H-2) du dv, split along the diagonal;
    # v = u (1 - w^(1/(2H-1))) removes the endpoint singularity of the inner integral
    H, t = mp.mpf(H), mp.mpf(t)
    a = 2 * H - 1
    inner = lambda u: mp.quad(lambda w: u * u * (1 - w ** (1 / a)) * (u * w ** (1 / a)) ** (2 * H - 2)
                              * u * w ** (1 / a - 1) / a, [0, 1])
    return 2 * H * a * mp.quad(inner, [0, t])


def nv_density_probe():
    g = lambda u: 1 + u * u
    return 1 / (2 * g(1)) * mp.e ** (-mp.quad(lambda u: u / g(u), [0, 1]))


def main():
    vals = {
        "covariance_H0.75_s0.5_t1": {"value": mp.nstr(covariance(0.75, 0.5, 1.0), 25), "digits": 20,
                                     "method": "mpmath direct evaluation",
                                     "args": {"H": 0.75, "s": 0.5, "t": 1.0}},
        "covariance_H0.6_s0.3_t0.7": {"value": mp.nstr(covariance(0.6, 0.3, 0.7), 25), "digits": 20,
                                      "method": "mpmath direct evaluation",
                                      "args": {"H": 0.6, "s": 0.3, "t": 0.7}},
        "iota_sigma_s_t1_H0.75": {"value": mp.nstr(iota_linear_sigma(0.75, 1.0), 25), "digits": 20,
                                  "method": "mpmath nested tanh-sinh quadrature (closed form 2/7)",
                                  "args": {"H": 0.75, "t": 1.0, "sigma": "s"}},
        "nv_density_g1pu2_x1": {"value": mp.nstr(nv_density_probe(), 25), "digits": 20,
                                "method": "mpmath quadrature (closed form 1/(4 sqrt 2))",
                                "args": {"m": 0.0, "mu": 1.0, "x": 1.0}},
    }
    out = {"schema": "fbsdelab-golden", "version": 1, "values": vals}
    Path(__file__).with_name("golden.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
