"""Published average predictive log-likelihoods: 20 FX series x (GARCH, EGARCH, GJR, GP-Vol)."""

import numpy as np

METHODS = ("GARCH", "EGARCH", "GJR", "GP-Vol")

TABLE1 = {
    "AUDUSD": (-1.3036, -1.5145, -1.3053, -1.2974),
    "BRLUSD": (-1.2031, -1.2275, -1.2016, -1.1805),
    "CADUSD": (-1.4022, -1.4095, -1.4028, -1.3862),
    "CHFUSD": (-1.3756, -1.4044, -1.4043, -1.3594),
    "CZKUSD": (-1.4224, -1.4733, -1.4222, -1.4569),
    "EURUSD": (-1.4185, -2.1205, -1.4266, -1.4038),
    "GBPUSD": (-1.3827, -3.5118, -1.3869, -1.3856),
    "IDRUSD": (-1.2230, -1.2443, -1.2094, -1.0399),
    "JPYUSD": (-1.3505, -2.7048, -1.3556, -1.3477),
    "KRWUSD": (-1.1891, -1.1688, -1.2097, -1.1541),
    "MXNUSD": (-1.2206, -3.4386, -1.2783, -1.1673),
    "MYRUSD": (-1.3940, -1.4125, -1.3951, -1.3925),
    "NOKUSD": (-1.4169, -1.5674, -1.4190, -1.4165),
    "NZDUSD": (-1.3699, -3.0368, -1.3795, -1.3896),
    "PLNUSD": (-1.3952, -1.3852, -1.3829, -1.3932),
    "SEKUSD": (-1.4036, -3.7058, -1.4022, -1.4073),
    "SGDUSD": (-1.3820, -2.8442, -1.3984, -1.3936),
    "TRYUSD": (-1.2247, -1.4617, -1.2388, -1.2367),
    "TWDUSD": (-1.3841, -1.3779, -1.3885, -1.2944),
    "ZARUSD": (-1.3184, -1.3448, -1.3018, -1.3041),
}

# published two-sided signed-rank p-values, GP-Vol against each baseline
TABLE2 = {"GARCH": 0.079, "EGARCH": 0.0001, "GJR": 0.100}

# exact two-sided p-values from full 2^20 sign enumeration (oracles.wilcoxon_exact_pvalue)
ENUMERATED_P = {"GARCH": 0.082550048828125, "EGARCH": 3.814697265625e-06, "GJR": 0.026004791259765625}


def table1():
    from gpvol.evaluation import MethodTable

    return MethodTable(tuple(TABLE1), METHODS, np.array(list(TABLE1.values())))
