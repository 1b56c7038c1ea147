"""Command-line experiment driver.

Subcommands::

    cma model export-defaults [--out FILE]
    cma model validate FILE
    cma solve mdp   --out FILE [--tol T]
    cma solve pomdp --p-obs V --out FILE
    cma solve all   --out DIR
    cma sweep --out DIR [--assets DIR]
    cma report DIR

Exit codes: 0 success, 1 validation error, 2 missing assets or cells.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

from .mdp import SolverConfig, ValueFunction, value_iteration
from .model import BH, ModelError, default_model_document, load_model, validate_document
from .pbvi import AlphaSet, PBVIConfig, pbvi_solve
from .policies import PolicyKind
from .pomdp import build_observation_model
from .sim import (
    EPISODE_COLUMNS,
    SimConfig,
    PolicyAssets,
    SimOutcome,
    Terminal,
    config_dict,
    run_batch,
    summarize,
    write_episode_log,
)

EXIT_OK, EXIT_INVALID, EXIT_MISSING = 0, 1, 2
DEFAULT_P_OBS = (1.0, 0.9, 0.8, 0.6)
OBS_FREE = (PolicyKind.NOOP, PolicyKind.TRUE_MDP)
VF_FILE = "value_function.json"
SPEC_FILE = "experiment.json"


class MissingAssetError(FileNotFoundError):
    pass


@dataclass
class ExperimentSpec:
    model: str | None = None
    p_obs: tuple[float, ...] = DEFAULT_P_OBS
    bh: tuple[str, ...] = tuple(b.name for b in BH)
    policies: tuple[str, ...] = tuple(k.value for k in PolicyKind)
    n_episodes: int = 5000
    base_seed: int = 0
    horizon: int = 100
    discount: float = 0.99
    out: str = "results"
    assets: str | None = None

    def __post_init__(self):
        self.p_obs = tuple(float(p) for p in self.p_obs)
        self.bh = tuple(BH[b].name for b in self.bh)
        self.policies = tuple(PolicyKind(p).value for p in self.policies)
        if not (self.p_obs and self.bh and self.policies):
            raise ValueError("experiment grids must be non-empty")
        for p in self.p_obs:
            if not 0.5 <= p <= 1.0:
                raise ValueError(f"p_obs values must lie in [0.5, 1], got {p}")
        if self.n_episodes < 1 or self.horizon < 1:
            raise ValueError("episodes and horizon must be positive")

    def cells(self) -> list[tuple[str, float | None, str]]:
        """(policy, p_obs or None, bh); observation-free policies run once per BH."""
        out = []
        for bh in self.bh:
            for pol in self.policies:
                if PolicyKind(pol) in OBS_FREE:
                    out.append((pol, None, bh))
                else:
                    out.extend((pol, p, bh) for p in self.p_obs)
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d.pop("assets")
        return d


def cell_name(policy: str, p_obs: float | None, bh: str) -> str:
    tag = "any" if p_obs is None else f"{p_obs:g}"
    return f"{policy}__p{tag}__{bh}"


def alpha_file(p_obs: float) -> str:
    return f"alphas_p{p_obs:g}.json"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Solving


def solve_mdp(model, discount: float, tol: float = 1e-9) -> ValueFunction:
    return value_iteration(model, SolverConfig(discount=discount, bellman_tolerance=tol))


def solve_pomdp(model, p_obs: float, discount: float, vf: ValueFunction | None = None) -> AlphaSet:
    return pbvi_solve(model, build_observation_model(p_obs), PBVIConfig(discount=discount), vf=vf)


def write_vf(vf: ValueFunction, path: Path) -> None:
    _atomic_write(path, _dump(vf.to_json()))


def write_alphas(alphas: AlphaSet, path: Path, p_obs: float, discount: float) -> None:
    _atomic_write(path, _dump({"p_obs": p_obs, "discount": discount, **alphas.to_json()}))


def ensure_assets(spec: ExperimentSpec, model, asset_dir: Path, solve_missing: bool = True):
    """Load or solve the value function and one alpha set per needed p_obs."""
    vf_path = asset_dir / VF_FILE
    if vf_path.exists():
        vf = ValueFunction.load(vf_path)
    elif solve_missing:
        vf = solve_mdp(model, spec.discount)
        write_vf(vf, vf_path)
    else:
        raise MissingAssetError(f"missing {vf_path}")
    alphas = {}
    if PolicyKind.POMDP.value in spec.policies:
        for p in spec.p_obs:
            path = asset_dir / alpha_file(p)
            if path.exists():
                alphas[p] = AlphaSet.load(path)
            elif solve_missing:
                alphas[p] = solve_pomdp(model, p, spec.discount, vf)
                write_alphas(alphas[p], path, p, spec.discount)
            else:
                raise MissingAssetError(f"missing {path}")
    return vf, alphas


# ---------------------------------------------------------------------------
# Sweep and report


def run_sweep(spec: ExperimentSpec, solve_missing: bool = True, log=print) -> Path:
    out = Path(spec.out)
    model = load_model(spec.model)
    asset_dir = Path(spec.assets) if spec.assets else out / "assets"
    vf, alphas = ensure_assets(spec, model, asset_dir, solve_missing)
    _atomic_write(out / SPEC_FILE, _dump(spec.to_json()))
    obs_models = {}
    results = []
    for pol, p, bh in spec.cells():
        p_run = 1.0 if p is None else p
        if p_run not in obs_models:
            obs_models[p_run] = build_observation_model(p_run)
        cfg = SimConfig(policy=pol, p_obs=p_run, bh_cohort=bh, n_episodes=spec.n_episodes,
                        horizon=spec.horizon, discount=spec.discount, base_seed=spec.base_seed)
        assets = PolicyAssets(vf, alphas.get(p) if pol == PolicyKind.POMDP.value else None)
        res = run_batch(cfg, model, assets, obs_models[p_run])
        name = cell_name(pol, p, bh)
        tmp = out / "cells" / f".{name}.csv"
        tmp.parent.mkdir(parents=True, exist_ok=True)
        write_episode_log(tmp, [res])
        os.replace(tmp, out / "cells" / f"{name}.csv")
        results.append((name, res))
        log(f"{name}: completion {res.summary.completion.mean:.4f} safety {res.summary.safety.mean:.4f}")
    rows = []
    for name, res in results:
        rows.append({"cell": name, **config_dict(res.config), **res.summary.to_dict()})
    _atomic_write(out / "summary.json", _dump(rows))
    _atomic_write(out / "summary.csv", _csv_text(rows))
    return out


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_cell(path: Path) -> list[SimOutcome]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EPISODE_COLUMNS:
            raise ModelError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            SimOutcome(
                episode=int(r["episode"]),
                terminal=Terminal[r["terminal"]],
                steps=int(r["steps"]),
                took_contingency=bool(int(r["took_contingency"])),
                cum_reward=float(r["cum_reward"]),
                disc_reward=float(r["disc_reward"]),
                p_minmax=float(r["p_minmax"]) if r["p_minmax"] else None,
            )
            for r in reader
        ]


def build_report(results_dir) -> tuple[str, str, list[str]]:
    """Return (tables text, long-format CSV text, missing cell names)."""
    results_dir = Path(results_dir)
    spec_path = results_dir / SPEC_FILE
    if not spec_path.exists():
        raise MissingAssetError(f"missing {spec_path}")
    spec = ExperimentSpec(**json.loads(spec_path.read_text(encoding="utf-8")))
    summaries, missing = {}, []
    for pol, p, bh in spec.cells():
        name = cell_name(pol, p, bh)
        path = results_dir / "cells" / f"{name}.csv"
        if not path.exists():
            missing.append(name)
            continue
        summaries[(pol, p, bh)] = summarize(read_cell(path))
    lines, long_rows = [], []
    metrics = (("completion", "completion"), ("safety", "safety"), ("reward", "cum_reward"))
    for bh in spec.bh:
        lines.append(f"Battery health {bh}")
        lines.append(f"{'policy':<10} {'p_obs':>6}  {'completion ± 2SEM':>20}  {'safety ± 2SEM':>20}  {'reward ± 2SEM':>22}")
        for pol in spec.policies:
            for p in spec.p_obs:
                key = (pol, None if PolicyKind(pol) in OBS_FREE else p, bh)
                s = summaries.get(key)
                if s is None:
                    lines.append(f"{pol:<10} {p:>6g}  {'missing':>20}")
                    continue
                cols = []
                for label, attr in metrics:
                    est = getattr(s, attr)
                    cols.append(f"{est.mean:.4f} ± {2 * est.sem:.4f}")
                    long_rows.append({
                        "bh": bh, "policy": pol, "p_obs": f"{p:g}", "metric": label,
                        "mean": repr(est.mean), "two_sem": repr(2 * est.sem), "n": s.n,
                    })
                lines.append(f"{pol:<10} {p:>6g}  {cols[0]:>20}  {cols[1]:>20}  {cols[2]:>22}")
        lines.append("")
    if missing:
        lines.append("Missing cells:")
        lines.extend(f"  {m}" for m in missing)
    return "\n".join(lines) + "\n", _csv_text(long_rows), missing


# ---------------------------------------------------------------------------
# argparse plumbing


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.split(",") if x)


def _spec_from_args(args) -> ExperimentSpec:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    overrides = {
        "model": args.model,
        "p_obs": args.p_obs,
        "bh": args.bh,
        "policies": args.policy,
        "n_episodes": args.episodes,
        "base_seed": args.seed,
        "horizon": args.horizon,
        "discount": args.gamma,
        "out": args.out,
        "assets": getattr(args, "assets", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**base)


def _add_common(p, out_required=False):
    p.add_argument("--model", help="model JSON (default: packaged defaults)")
    p.add_argument("--gamma", type=float, help="discount factor (default 0.99)")
    p.add_argument("--out", required=out_required, help="output file or directory")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cma", description="Contingency-management planning experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)

    mp = sub.add_parser("model", help="export or validate model documents")
    msub = mp.add_subparsers(dest="model_cmd", required=True)
    ex = msub.add_parser("export-defaults")
    ex.add_argument("--out")
    va = msub.add_parser("validate")
    va.add_argument("file")

    sp = sub.add_parser("solve", help="solve the MDP or POMDP policies")
    ssub = sp.add_subparsers(dest="solve_cmd", required=True)
    mdp_p = ssub.add_parser("mdp")
    _add_common(mdp_p, out_required=True)
    mdp_p.add_argument("--tol", type=float, default=1e-9, help="Bellman residual tolerance")
    pp = ssub.add_parser("pomdp")
    _add_common(pp, out_required=True)
    pp.add_argument("--p-obs", type=float, required=True)
    pp.add_argument("--vf", help="pre-solved value function (seeds the belief set)")
    ap_all = ssub.add_parser("all")
    _add_common(ap_all, out_required=True)
    ap_all.add_argument("--p-obs", type=_float_list, help="comma-separated grid")

    sw = sub.add_parser("sweep", help="run every (policy, p_obs, bh) cell")
    _add_common(sw)
    sw.add_argument("--config", help="experiment JSON; flags override its fields")
    sw.add_argument("--assets", help="directory of solved assets (default OUT/assets)")
    sw.add_argument("--no-solve", action="store_true", help="fail instead of solving missing assets")
    sw.add_argument("--episodes", type=int)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--p-obs", type=_float_list)
    sw.add_argument("--bh", type=_str_list)
    sw.add_argument("--policy", type=_str_list)
    sw.add_argument("--horizon", type=int)

    rp = sub.add_parser("report", help="tabulate a finished sweep")
    rp.add_argument("results")
    rp.add_argument("--out", help="directory for report.txt and report_long.csv (default: results dir)")
    return ap


def _model_for(args):
    return load_model(args.model)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except MissingAssetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ModelError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def _dispatch(args) -> int:
    if args.cmd == "model":
        if args.model_cmd == "export-defaults":
            text = _dump(default_model_document())
            if args.out:
                _atomic_write(Path(args.out), text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        doc = json.loads(Path(args.file).read_text(encoding="utf-8"))
        report = validate_document(doc)
        for v in report.violations:
            print(f"violation: {v}")
        for act, states in report.unreachable.items():
            if states:
                print(f"note: {len(states)} states unreachable under {act}")
        print("ok" if report.ok else "invalid")
        return EXIT_OK if report.ok else EXIT_INVALID

    if args.cmd == "solve":
        model = _model_for(args)
        gamma = 0.99 if args.gamma is None else args.gamma
        if args.solve_cmd == "mdp":
            write_vf(solve_mdp(model, gamma, args.tol), Path(args.out))
        elif args.solve_cmd == "pomdp":
            vf = ValueFunction.load(args.vf) if args.vf else solve_mdp(model, gamma)
            write_alphas(solve_pomdp(model, args.p_obs, gamma, vf), Path(args.out), args.p_obs, gamma)
        else:
            spec = ExperimentSpec(model=args.model, discount=gamma, out=args.out,
                                  p_obs=args.p_obs or DEFAULT_P_OBS)
            ensure_assets(spec, model, Path(args.out))
        return EXIT_OK

    if args.cmd == "sweep":
        spec = _spec_from_args(args)
        run_sweep(spec, solve_missing=not args.no_solve)
        return EXIT_OK

    tables, long_csv, missing = build_report(args.results)
    out = Path(args.out or args.results)
    _atomic_write(out / "report.txt", tables)
    _atomic_write(out / "report_long.csv", long_csv)
    sys.stdout.write(tables)
    return EXIT_MISSING if missing else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
