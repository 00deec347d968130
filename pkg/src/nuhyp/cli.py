"""Command-line front end: ``nuhyp <command> [--config FILE] [flags]``.

Exit codes: 0 ok, 2 usage, 3 precondition, 4 solver, 5 verification.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import blocks, cocycle, horseshoe, manifolds, shadowing, spectrum
from .systems import default_splitting, get_map

EXIT_OK, EXIT_USAGE, EXIT_PRE, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4, 5

COMMANDS = ("analyze", "manifold", "shadow", "close", "horseshoe", "spectrum", "select-power")

# per-command defaults for fields left unset
_DEFAULTS = {
    "analyze": {"epsilon": 0.05, "n": 100_000},
    "manifold": {"epsilon": 0.05, "n": 20_000, "t": 2.0},
    "shadow": {"epsilon": 0.05, "n": 20_000, "t": 2.0},
    "close": {"epsilon": 0.05, "n": 1_000_000, "t": 1.0},
    "horseshoe": {"epsilon": 0.3, "n": 1_000_000, "t": 1.0},
    "spectrum": {"epsilon": 0.05, "n": 1_000_000, "t": 1.0},
    "select-power": {"epsilon": 0.05, "n": 100_000},
}


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


@dataclass
class RunConfig:
    system: str = "cat"
    epsilon: float = None
    levels: tuple = (1, 2, 4, 8, 16, 32)
    n: int = None
    window: int = 200
    seed: int = 0
    x0: tuple = (0.3, 0.7)
    exponents: tuple = None
    t: float = None
    beta: float = 1e-7
    K: int = 5
    n_spec: int = 25
    po: str = None
    solver: str = "both"
    period: int = None
    lag_max: int = 6000
    hs_n: int = 12
    max_symbols: int = None
    n_words: int = 400
    support_size: int = 1_000_000
    theta: float = 0.5
    candidates: tuple = (1, 2, 4, 8, 16)
    out: str = "."

    def hashed(self):
        d = asdict(self)
        d.pop("out")
        if d["po"]:
            # the pseudo-orbit enters through its content, not its path
            with open(d["po"], "rb") as fh:
                d["po"] = hashlib.sha256(fh.read()).hexdigest()
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _tuple_of(conv):
    def parse(text):
        parts = [p for p in str(text).replace(";", ",").split(",") if p.strip()]
        return tuple(conv(p) for p in parts)
    return parse


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text}")
    return int(v)


def _opt_int(text):
    return None if str(text).lower() in ("", "none") else _int(text)


_CONVERT = {
    "system": str, "epsilon": float, "levels": _tuple_of(float), "n": _int, "window": _int, "seed": _int,
    "x0": _tuple_of(float), "exponents": _tuple_of(float), "t": float, "beta": float, "K": _int,
    "n_spec": _int, "po": str, "solver": str, "period": _int, "lag_max": _int, "hs_n": _int,
    "max_symbols": _opt_int, "n_words": _int, "support_size": _int, "theta": float,
    "candidates": _tuple_of(_int), "out": str,
}


def read_config(path):
    """key = value lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "eps":
                key = "epsilon"
            if key not in _CONVERT:
                raise UsageError(f"{path}:{lineno}: unknown key '{key}'")
            try:
                out[key] = _CONVERT[key](val)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


_HELP = {
    "system": "cat, perturbed-cat:delta=D or file:PATH (coefficient file)",
    "epsilon": "resonance tolerance (default per command)",
    "levels": "comma-separated block levels t",
    "n": "orbit length; accepts 1e5 style",
    "window": "window W for the sup in a2",
    "x0": "base point as x,y",
    "exponents": "reference exponents; estimated from the orbit when omitted",
    "t": "block level used by manifold/shadow/close/spectrum",
    "beta": "jump size for generated pseudo-orbits",
    "K": "pseudo-orbit half-length",
    "n_spec": "segment length n_k of generated pseudo-orbits",
    "po": "pseudo-orbit file (lines 'k x1 x2 n_k')",
    "solver": "both, constructive or newton",
    "period": "close: period of the orbit through x0 (skips the recurrence search)",
    "lag_max": "largest recurrence lag searched by close",
    "hs_n": "horseshoe word length n",
    "max_symbols": "cap on the alphabet size",
    "n_words": "number of coded words checked by horseshoe",
    "support_size": "orbit points used as the support sample",
    "theta": "select-power density threshold",
    "candidates": "select-power candidate powers",
    "out": "output directory",
}


def build_parser():
    p = argparse.ArgumentParser(prog="nuhyp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag, "--eps"] if f.name == "epsilon" else [flag]
        p.add_argument(*names, dest=f.name, default=None, type=str, help=_HELP.get(f.name))
    return p


def make_config(args):
    vals = {}
    if args.config:
        vals.update(read_config(args.config))
    for f in fields(RunConfig):
        raw = getattr(args, f.name)
        if raw is not None:
            try:
                vals[f.name] = _CONVERT[f.name](raw)
            except ValueError as exc:
                raise UsageError(f"--{f.name.replace('_', '-')}: {exc}") from None
    for k, v in _DEFAULTS[args.command].items():
        vals.setdefault(k, v)
    cfg = RunConfig(**vals)
    _validate(cfg, args.command)
    return cfg


def _validate(cfg, command):
    if cfg.n < 1:
        raise UsageError("--n must be a positive integer")
    if cfg.epsilon <= 0:
        raise UsageError("--eps must be positive")
    if cfg.window < 0:
        raise UsageError("--window must be >= 0")
    if cfg.t is not None and cfg.t < 1:
        raise UsageError("--t must be >= 1")
    if cfg.solver not in ("both", "constructive", "newton"):
        raise UsageError("--solver must be both, constructive or newton")
    if len(cfg.x0) != 2:
        raise UsageError("--x0 needs two coordinates")
    if cfg.K < 0 or cfg.n_spec < 1 or cfg.hs_n < 1:
        raise UsageError("--K, --n-spec and --hs-n must be positive")
    if any(lv < 1 for lv in cfg.levels):
        raise UsageError("levels must be >= 1")
    try:
        get_map(cfg.system)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"--system: {exc}") from None


# ---------------------------------------------------------------------------
# output


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


class Output:
    def __init__(self, cfg: RunConfig, command):
        self.cfg = cfg
        self.command = command
        self.hash = cfg.hashed()
        self.files = []
        os.makedirs(cfg.out, exist_ok=True)

    def json(self, name, payload):
        body = {"command": self.command, "config": _plain(asdict(self.cfg)), "config_hash": self.hash}
        body["config"].pop("out")
        body.update(_plain(payload))
        path = os.path.join(self.cfg.out, name)
        with open(path, "w") as fh:
            json.dump(body, fh, sort_keys=True, indent=1)
            fh.write("\n")
        self.files.append(path)

    def csv(self, name, header, rows):
        path = os.path.join(self.cfg.out, name)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.files.append(path)


# ---------------------------------------------------------------------------
# shared pieces


def _setup(cfg):
    f = get_map(cfg.system)
    s = default_splitting(f)
    return f, s


def _exponents(cfg, f, s, stats=None):
    if cfg.exponents is not None:
        if len(cfg.exponents) != 2:
            raise UsageError("--exponents needs chi_E, chi_F")
        return tuple(cfg.exponents)
    if stats is not None and stats.length >= 1000:
        return blocks.estimate_exponents(f, s, np.array(cfg.x0), stats=stats)
    return blocks.estimate_exponents(f, s, np.array(cfg.x0), n=max(1000, min(cfg.n, 100_000)))


def _constants(cfg, f, s, seg, ex, t):
    pts = seg.points[: min(len(seg.points), 20_000)]
    r = manifolds.chart_radius(f, s, pts[::200], cfg.epsilon)
    C0 = shadowing.measure_c0(s, pts[::50])
    return shadowing.shadow_constants(ex, cfg.epsilon, t, r, C0), r


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg, out):
    f, s = _setup(cfg)
    seg = cocycle.orbit(f, np.array(cfg.x0), cfg.n)
    stats = cocycle.CocycleStats(seg, s)
    ex = _exponents(cfg, f, s, stats)
    eps0 = blocks.epsilon_zero(ex)
    if cfg.epsilon >= eps0:
        raise manifolds.HypothesisError(f"epsilon {cfg.epsilon} >= eps0 {eps0:.6g}")
    W = min(cfg.window, cfg.n)
    prof = blocks.resonance_sequences(seg, s, ex, cfg.epsilon, window=W, stats=stats)
    summary = prof.summary(cfg.levels)
    out.json("analyze.json", {"exponents": list(ex), "eps0": eps0, "profile": summary,
                              "growth_bound_violation": blocks.growth_bound_violation(prof),
                              "window_sensitivity": prof.window_sensitivity() if prof.windowed else 0.0})
    lev = prof.level()
    rows = [[k, float(prof.log_a1[k]), float(prof.log_a2[k])] + [int(lev[k] <= math.log(t) + 1e-12) for t in cfg.levels]
            for k in range(prof.n_computed)]
    out.csv("profile.csv", ["n", "log_a1", "log_a2"] + [f"in_H_{t:g}" for t in cfg.levels], rows)
    return summary


def cmd_select_power(cfg, out):
    f, s = _setup(cfg)
    ex = tuple(cfg.exponents) if cfg.exponents else None
    sel = blocks.select_power(f, s, np.array(cfg.x0), cfg.epsilon, cfg.theta, cfg.candidates, n=cfg.n,
                              window=cfg.window, exponents=ex)
    out.json("select_power.json", {"N": sel.N, "density": sel.density,
                                   "densities": {str(k): v for k, v in sel.densities.items()},
                                   "monotone": sel.monotone})
    return sel


def _block_orbit(cfg, f, s, span):
    seg = cocycle.orbit(f, np.array(cfg.x0), cfg.n)
    stats = cocycle.CocycleStats(seg, s)
    ex = _exponents(cfg, f, s, stats)
    prof = blocks.resonance_sequences(seg, s, ex, cfg.epsilon, window=min(cfg.window, cfg.n // 2), stats=stats)
    H = blocks.resonance_times(prof, cfg.t)
    times = H.times
    ok = times[(times >= span) & (times + span < len(seg.points))]
    if not len(ok):
        raise blocks.EmptyBlockError(f"no level-{cfg.t:g} block point with {span} steps on both sides")
    return seg, stats, ex, prof, times, int(ok[0])


def cmd_manifold(cfg, out):
    f, s = _setup(cfg)
    span = 300
    seg, stats, ex, prof, times, i = _block_orbit(cfg, f, s, span)
    r = manifolds.chart_radius(f, s, seg.points[: 20_000: 200], cfg.epsilon)
    fwd = manifolds.OrbitFrames(f, s, seg.points[i: i + span + 1])
    ret = [int(k - i) for k in times if i < k <= i + span]
    dF, cF = manifolds.local_stable_manifold(fwd, ret, cfg.t, cfg.epsilon, r, s, ex)
    back = manifolds.OrbitFrames(f, s, seg.points[i - span: i + 1])
    bret = [int(i - k) for k in times[::-1] if i - span <= k < i]
    dE, cE = manifolds.local_unstable_manifold(back, bret, cfg.t, cfg.epsilon, r, s, ex)
    ok = cF.audit_pass and cE.audit_pass and cF.tangency <= 1e-6 and cE.tangency <= 1e-6
    try:
        th1 = manifolds.theta_one(f, s, seg.points[: 20_000: 200], cfg.epsilon, cfg.t)
    except manifolds.HypothesisError:
        th1 = None  # reported, not enforced
    out.json("manifold.json", {"index": i, "point": seg.points[i], "exponents": list(ex), "r": r, "theta1": th1,
                               "stable": {"disk": dF.to_dict(), "certificate": cF.to_dict()},
                               "unstable": {"disk": dE.to_dict(), "certificate": cE.to_dict()},
                               "passed": ok})
    xs = np.linspace(dF.lo, dF.hi, 101)
    ys = np.linspace(dE.lo, dE.hi, 101)
    rows = [["F", a, *p] for a, p in zip(xs, dF.points(xs))] + [["E", a, *p] for a, p in zip(ys, dE.points(ys))]
    out.csv("manifold_curves.csv", ["bundle", "s", "x1", "x2"], rows)
    if not ok:
        raise VerificationFailure("manifold audit failed")


def cmd_shadow(cfg, out):
    f, s = _setup(cfg)
    seg = cocycle.orbit(f, np.array(cfg.x0), cfg.n)
    stats = cocycle.CocycleStats(seg, s)
    ex = _exponents(cfg, f, s, stats)
    const, r = _constants(cfg, f, s, seg, ex, cfg.t)
    if cfg.po:
        po = shadowing.PseudoOrbit.read(cfg.po)
    else:
        prof = blocks.resonance_sequences(seg, s, ex, cfg.epsilon, window=min(cfg.window, cfg.n // 2),
                                          stats=stats)
        B = blocks.block_points(prof, blocks.resonance_times(prof, cfg.t), 0)
        po = shadowing.build_pseudo_orbit(f, B, cfg.beta, cfg.n_spec, cfg.K, seed=cfg.seed)
    payload = {"constants": const.as_dict(), "pseudo_orbit": {"K": po.K, "beta": po.beta, "ns": po.ns,
                                                              "points": po.points}}
    res = {}
    if cfg.solver in ("both", "constructive"):
        res["constructive"] = shadowing.shadow_constructive(f, s, po, const, check_blocks=not cfg.po)
    if cfg.solver in ("both", "newton"):
        res["newton"] = shadowing.shadow_newton(f, po, lam=const.lam, C=const.C1)
    for k, v in res.items():
        payload[k] = v.to_dict()
    ok = all(v.envelope_pass for v in res.values())
    if len(res) == 2:
        agree = float(np.max(np.abs(res["constructive"].z_offset - res["newton"].z_offset)))
        payload["agreement"] = agree
        ok = ok and agree <= 1e-8
    payload["passed"] = ok
    out.json("shadow.json", payload)
    if not ok:
        raise VerificationFailure("shadowing verification failed")


def cmd_close(cfg, out):
    f, s = _setup(cfg)
    if cfg.period is not None:
        x0 = np.array(cfg.x0)
        seg = cocycle.orbit(f, x0, max(2000, min(cfg.n, 20_000)))
        ex = _exponents(cfg, f, s)
        const, _ = _constants(cfg, f, s, seg, ex, cfg.t)
        po = shadowing.periodic_pseudo_orbit(x0, cfg.period, K=1, fmap=f)
        cert = shadowing.close_periodic(f, s, po, const)
        info = {"source": "given point"}
    else:
        seg = cocycle.orbit(f, np.array(cfg.x0), cfg.n)
        stats = cocycle.CocycleStats(seg, s)
        ex = _exponents(cfg, f, s, stats)
        const, r = _constants(cfg, f, s, seg, ex, cfg.t)
        prof = blocks.resonance_sequences(seg, s, ex, cfg.epsilon, window=min(cfg.window, cfg.n // 2),
                                          stats=stats)
        mask = np.zeros(len(seg.points), dtype=bool)
        mask[blocks.resonance_times(prof, cfg.t).times] = True
        rec = spectrum.find_recurrences(seg.points, const.beta0, max(const.N2, 1), cfg.lag_max, mask)
        if not len(rec):
            raise manifolds.HypothesisError("no block recurrence below beta0 within the orbit")
        i, n0 = int(rec.start[0]), int(rec.lag[0])
        po = shadowing.periodic_pseudo_orbit(seg.points[i], n0, K=1, fmap=f)
        cert = shadowing.close_periodic(f, s, po, const)
        info = {"source": "recurrence", "start": i, "gap": float(rec.gap[0])}
    out.json("close.json", {"certificate": cert.to_dict(), "constants": const.as_dict(), **info})
    out.csv("cycle.csv", ["k", "x1", "x2"], [[k, float(p[0]), float(p[1])] for k, p in enumerate(cert.cycle)])
    if not cert.passed:
        raise VerificationFailure("periodic certificate failed")


def cmd_horseshoe(cfg, out):
    f, s = _setup(cfg)
    if cfg.support_size < 1:
        raise manifolds.HypothesisError("missing support sample (support_size < 1)")
    ex = _exponents(cfg, f, s)
    hc = horseshoe.HorseshoeConfig(n=cfg.hs_n, epsilon=cfg.epsilon, t=cfg.t, n_mu=cfg.n, x0=tuple(cfg.x0),
                                   max_symbols=cfg.max_symbols, n_words=cfg.n_words,
                                   support_size=cfg.support_size, seed=cfg.seed, window=cfg.window)
    model = horseshoe.build_horseshoe(f, s, hc, exponents=ex)
    out.json("horseshoe.json", model.to_dict())
    out.csv("alphabet.csv", ["symbol", "orbit_index", "x1", "x2"],
            [[k, int(i), float(p[0]), float(p[1])] for k, (i, p) in enumerate(zip(model.alphabet_index, model.alphabet))])
    out.csv("decoded.csv", ["word", "x1", "x2"],
            [["-".join(map(str, w)), float(p[0]), float(p[1])] for w, p in zip(model.words, model.coded_points)])
    cloud = model.cloud()
    out.csv("cloud.csv", ["x1", "x2"], [[float(p[0]), float(p[1])] for p in cloud[:: max(1, len(cloud) // 20000)]])
    failed = sorted(k for k, v in model.audits.items() if isinstance(v, dict) and v.get("pass") is False)
    if failed:
        raise VerificationFailure("horseshoe audits failed: " + ", ".join(failed))
    return model


def cmd_spectrum(cfg, out):
    f = get_map(cfg.system)
    s = default_splitting(f, full=True)
    bud = spectrum.SpectrumBudget(n_orbit=cfg.n, window=cfg.window, lag_max=cfg.lag_max)
    ex = list(cfg.exponents) if cfg.exponents else None
    match, cert = spectrum.approximate_spectrum_by_periodic(f, s, np.array(cfg.x0), cfg.epsilon, bud, t=cfg.t,
                                                            exponents=ex)
    out.json("spectrum.json", {"match": match.to_dict(), "certificate": cert.to_dict()})
    rows = [[j, float(a), float(b), float(abs(a - b))]
            for j, (a, b) in enumerate(zip(match.mu_exponents, match.periodic_exponents))]
    out.csv("spectrum.csv", ["bundle", "mu", "periodic", "gap"], rows)
    if not match.passed:
        raise VerificationFailure(f"spectrum gap {match.max_gap:.3g} >= {match.tolerance:.3g}")
    return match


_HANDLERS = {"analyze": cmd_analyze, "manifold": cmd_manifold, "shadow": cmd_shadow, "close": cmd_close,
             "horseshoe": cmd_horseshoe, "spectrum": cmd_spectrum, "select-power": cmd_select_power}


def _classify(exc):
    pre = (manifolds.HypothesisError, shadowing.PseudoOrbitError, blocks.EmptyBlockError, blocks.CoverageError,
           horseshoe.EmptySelectionError, manifolds.ChartError, FileNotFoundError)
    solver = (shadowing.SolverError, manifolds.ConvergenceError)
    if isinstance(exc, pre):
        return EXIT_PRE
    if isinstance(exc, solver):
        return EXIT_SOLVER
    return None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        cfg = make_config(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"nuhyp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Output(cfg, args.command)
    try:
        _HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"nuhyp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"nuhyp: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # mapped to the documented exit codes
        code = _classify(exc)
        if code is None:
            raise
        print(f"nuhyp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    print(f"{args.command}: ok ({out.hash})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
