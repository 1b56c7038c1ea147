"""Regenerate src/cma_planner/data/default_model.json.

Motor-margin and motor-health tables are the published NoOp values; the other
factors are the package's documented defaults.
"""
import json
import pathlib
from itertools import product

from cma_planner.model import DOMAINS, CMAModel, FactorTable, RewardWeights

MM_TABLE = {  # (MM_t, MH_t) -> P(MM_{t+1} = MM0)
    ("MM0", "NF"): 0.0,
    ("MM0", "SF"): 0.995,
    ("MM0", "JF"): 1.0,
    ("MM1", "NF"): 0.0,
    ("MM1", "SF"): 0.002809,
    ("MM1", "JF"): 1.0,
}
MH_TABLE = {
    "NF": {"NF": 0.9999525, "SF": 0.0000475, "JF": 0.0},
    "SF": {"NF": 0.0, "SF": 0.997191, "JF": 0.002809},
    "JF": {"NF": 0.0, "SF": 0.0, "JF": 1.0},
}
RM_DROP = {"G": 0.0001, "M": 0.0005, "P": 0.002}
# P(RM0 -> RM1) on the step an emergency landing is commanded. Pre-planned
# practical sites are out of reach on a poor battery, so LandPract cannot
# restore the margin there; LandASAP searches the live footprint.
RM_RESTORE = {
    "LandASAP": {"G": 0.9, "M": 0.9, "P": 0.9},
    "LandPract": {"G": 0.9, "M": 0.9, "P": 0.0},
}
# P(MM0 -> MM1) under a spalling fault on the step an emergency landing is
# commanded: the shorter remaining flight fits inside the motor's RUL again.
MM_RESTORE = {"LandASAP": 0.9, "LandPract": 0.9}
COMPLETE = {"N": 0.01, "ELPract": 0.05, "ELASAP": 0.10}
FAIL_RM0 = 0.05
FAIL_JAM = 0.05
FAIL_SPALL = 0.05  # spalled motor expected to quit before the plan ends
FS_EFFECT = {"LandASAP": "ELASAP", "LandPract": "ELPract"}


def _binary(p1):
    return {"0": 1.0 - p1, "1": p1}


def default_factors():
    fs = {
        (f, a): {v: float(v == FS_EFFECT.get(a, f)) for v in DOMAINS["FS"]}
        for f, a in product(DOMAINS["FS"], DOMAINS["A"])
    }
    mh = {(m,): dict(MH_TABLE[m]) for m in DOMAINS["MH"]}
    mm = {}
    for m, h, a in product(DOMAINS["MM"], DOMAINS["MH"], DOMAINS["A"]):
        p0 = MM_TABLE[(m, h)]
        if h == "SF" and a in MM_RESTORE:
            p0 *= 1.0 - MM_RESTORE[a]
        mm[(m, h, a)] = {"MM0": p0, "MM1": 1.0 - p0}
    bh = {(b,): {v: float(v == b) for v in DOMAINS["BH"]} for b in DOMAINS["BH"]}
    rm = {}
    for b, r, a in product(DOMAINS["BH"], DOMAINS["RM"], DOMAINS["A"]):
        if a in FS_EFFECT:
            p1 = RM_RESTORE[a][b] if r == "RM0" else 1.0
        else:
            p1 = 0.0 if r == "RM0" else 1.0 - RM_DROP[b]
        rm[(b, r, a)] = {"RM0": 1.0 - p1, "RM1": p1}
    c = {(f, r): _binary(COMPLETE[f] if r == "RM1" else 0.0) for f, r in product(DOMAINS["FS"], DOMAINS["RM"])}
    fl = {}
    for h, m, r in product(DOMAINS["MH"], DOMAINS["MM"], DOMAINS["RM"]):
        p = FAIL_RM0 if r == "RM0" else 0.0
        if m == "MM0":
            p += {"JF": FAIL_JAM, "SF": FAIL_SPALL}.get(h, 0.0)
        fl[(h, m, r)] = _binary(p)
    return [
        FactorTable("FS", ("FS", "A"), fs),
        FactorTable("MH", ("MH",), mh),
        FactorTable("MM", ("MM", "MH", "A"), mm),
        FactorTable("BH", ("BH",), bh),
        FactorTable("RM", ("BH", "RM", "A"), rm),
        FactorTable("C", ("FS", "RM"), c),
        FactorTable("FL", ("MH", "MM", "RM"), fl),
    ]


if __name__ == "__main__":
    model = CMAModel.from_parts(default_factors(), RewardWeights())
    out = pathlib.Path(__file__).resolve().parents[1] / "src/cma_planner/data/default_model.json"
    out.write_text(json.dumps(model.to_json(), indent=1) + "\n")
    print(f"wrote {out}")
