"""Independent high-precision evaluation of the coupling constants.

Written separately from the package: every formula is typed out again here
at 50 significant digits, with the closed forms of f and g inlined.  Run it
to regenerate ``tests/fixtures/golden_constants.json``:

    python tests/oracles/constants_oracle.py
"""

import json
from pathlib import Path

import mpmath as mp

mp.mp.dps = 50

NAMES = ["M", "rho3", "L4", "S1s", "gamma1", "gamma2", "C0", "Rs", "R1s", "S2s",
         "eps", "c0", "K1", "K2", "K3", "cstar", "kstar", "Kstar", "Cp", "lambdap"]


def evaluate(rho1, L1, L2, L3, theta, Q, rho2, Sstar, p, n, printed):
    rho1, L1, L2, L3, theta, rho2, Sstar, p = map(mp.mpf, (rho1, L1, L2, L3, theta, rho2, Sstar, p))
    Qm = mp.matrix(Q)
    ev = mp.eigsy(Qm)[0]
    lam = sorted(ev[i] for i in range(Qm.rows))
    normQ = lam[-1]
    normQinv_half = 1 / mp.sqrt(lam[0])          # |Q^{-1/2}|
    normTwoQinv = 2 / lam[0]                      # |2 Q^{-1}|
    sub = Qm[n:, n:]
    evs = mp.eigsy(sub)[0]
    Q22 = max(evs[i] for i in range(sub.rows))
    th2 = theta ** 2

    M = 2 * L2 / rho1
    rho3 = rho1 / (4 * (1 + rho1 / (4 * (L3 + L1 * M))))
    L4 = (L3 + L1 * M + rho3) / 8
    S1s = Sstar + 16 * Q22 * th2 / (Sstar * rho2)
    gamma1 = min(M, 1) * normTwoQinv ** mp.mpf(-0.5)
    gamma2 = max(1 / M, 1) * mp.sqrt(normQ)
    C0 = gamma2 * (M + 1) / 2
    Rs = Sstar / gamma2
    R1s = S1s / gamma1
    S2s = max(gamma2 * R1s, S1s)
    fp = mp.exp(-L4 * R1s ** 2 / (2 * th2))
    eps = rho3 * Rs / (16 * Q22 * th2) * fp
    c0 = 8 * Q22 * eps * th2 / Sstar

    if printed:
        f_R1 = (2 * th2 / L4) * (1 - mp.exp(-L4 * R1s / (2 * th2)))
    else:
        f_R1 = mp.quad(lambda s: mp.exp(-L4 * s ** 2 / (2 * th2)), [0, R1s])

    def g(s):
        if s <= Sstar:
            return mp.mpf(0)
        if s <= S2s:
            return eps / 2 * (s - Sstar) ** 2
        top = eps / 2 * (S2s - Sstar) ** 2
        if printed:
            return (s - S2s) ** p + top
        return top + eps * (S2s - Sstar) * (s - S2s) + (s - S2s) ** p

    K1 = 1 + (f_R1 + g(S2s)) / S2s ** p + eps * (S2s - Sstar) / S2s ** (p - 1)
    K2 = (f_R1 + g(2 * (S2s + 1))) / S1s
    K3 = 1 + mp.sqrt(normQ) * max(1 / M, 1) * g(S1s) / Sstar
    cstar = min(p * rho2 / (2 ** p * K1), c0 / K2, rho3 * fp / (2 * K3))
    a = normQinv_half
    kstar = min((2 * a) ** p * min(1, (2 * S2s) ** (p - 1)),
                g(S1s) / (2 * S2s) * min(a, a ** p / (2 * S2s) ** (p - 1)),
                fp * min(M ** p, 1) / max(1, R1s ** (p - 1)))
    Kstar = max(K1 * normQ ** (p / 2), K2 * mp.sqrt(normQ), mp.sqrt(2) * K3 * max(M, 1))
    vals = dict(M=M, rho3=rho3, L4=L4, S1s=S1s, gamma1=gamma1, gamma2=gamma2, C0=C0, Rs=Rs,
                R1s=R1s, S2s=S2s, eps=eps, c0=c0, K1=K1, K2=K2, K3=K3, cstar=cstar,
                kstar=kstar, Kstar=Kstar, Cp=Kstar / kstar, lambdap=cstar)
    return {k: mp.nstr(vals[k], 30, min_fixed=1, max_fixed=0) for k in NAMES}


GOLDEN = dict(rho1=1, L1=1, L2=1, L3=1, theta=1, Q=[[1, 0], [0, 1]], rho2=1, Sstar=1, p=2, n=1)


def main():
    out = {
        "params": GOLDEN,
        "derived": evaluate(**GOLDEN, printed=False),
        "printed": evaluate(**GOLDEN, printed=True),
    }
    path = Path(__file__).resolve().parent.parent / "fixtures" / "golden_constants.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
