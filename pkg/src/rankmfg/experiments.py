"""Configuration, stage orchestration and run manifests.

A run is described by one TOML file.  Every random draw in the run flows from
the master ``seed`` through labelled substreams, so the same file reproduces
every output byte for byte, whatever the thread count.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, rng
from .common_noise import conditional_fixed_point_check, nplayer_common_noise_gap
from .errors import ValidationError
from .fixed_point import FixedPointConfig, initial_measure, solve_equilibrium
from .measure import EmpiricalMeasure
from .model import TEMPLATES, ModelParams, RewardSpec, load_reward_table, reward_from_template
from .nash import DEFAULT_LADDER, verify_nash
from .value import ValueField, pde_residual

STAGES = ("solve", "verify-nash", "common-noise", "value-sweep")
EQUILIBRIUM_FILE = "equilibrium_measure.csv"
MANIFEST_FILE = "manifest.json"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3
EXIT_NONCONVERGENCE = 4


# -- configuration schema --------------------------------------------------------------


@dataclass
class ModelSection:
    sigma: float = 1.0
    sigma0: float = 0.0
    cost_c: float = 1.0
    horizon_T: float = 1.0


@dataclass
class RewardSection:
    template: str = "linear"
    table: str = ""
    params: dict = field(default_factory=dict)


@dataclass
class FixedPointSection:
    M: int = 200_000
    max_iters: int = 50
    tol_w1: float = 5e-3
    damping: float = 1.0
    seed_policy: str = "fixed"
    base_steps: int = 500
    cluster: float = 4.0
    auto_damping: bool = True
    fallback_damping: float = 0.5
    stall_window: int = 3
    bootstrap_reps: int = 16
    initial: str = "dirac"
    initial_scale: float = 2.0


@dataclass
class NashSection:
    N_values: list = field(default_factory=lambda: list(DEFAULT_LADDER))
    reps: int = 0  # 0 sizes replications from path_budget
    path_budget: int = 1 << 17
    deviators: int = 4
    family: str = "default"
    value_paths: int = 200_000


@dataclass
class CommonNoiseSection:
    sigma0: float = 0.0  # 0 defers to model.sigma0
    w_count: int = 10
    M: int = 100_000
    N_values: list = field(default_factory=lambda: [64, 256, 1024])
    reps: int = 0
    path_budget: int = 1 << 17
    deviations: bool = True


@dataclass
class ValueSweepSection:
    measure: str = "equilibrium"  # "equilibrium", "dirac", or a measure file
    t_count: int = 50
    t_max_fraction: float = 0.9
    x_min: float = -3.0
    x_max: float = 3.0
    x_count: int = 50
    fd_step: float = 1e-4


SECTIONS = {
    "model": ModelSection,
    "reward": RewardSection,
    "fixed_point": FixedPointSection,
    "nash": NashSection,
    "common_noise": CommonNoiseSection,
    "value_sweep": ValueSweepSection,
}
TOP_LEVEL = {"seed": int, "output_dir": str, "stages": list, "threads": int, "equilibrium_file": str}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "out"
    stages: list = field(default_factory=lambda: ["solve"])
    threads: int = 1
    equilibrium_file: str = ""
    model: ModelSection = field(default_factory=ModelSection)
    reward: RewardSection = field(default_factory=RewardSection)
    fixed_point: FixedPointSection = field(default_factory=FixedPointSection)
    nash: NashSection = field(default_factory=NashSection)
    common_noise: CommonNoiseSection = field(default_factory=CommonNoiseSection)
    value_sweep: ValueSweepSection = field(default_factory=ValueSweepSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -- derived objects --

    @property
    def params(self) -> ModelParams:
        m = self.model
        return ModelParams(m.sigma, 0.0, m.cost_c, m.horizon_T)

    @property
    def common_sigma0(self) -> float:
        return self.common_noise.sigma0 or self.model.sigma0

    def reward_spec(self) -> RewardSpec:
        r = self.reward
        if r.table:
            return load_reward_table(self.resolve(r.table), **r.params)
        return reward_from_template(r.template, **r.params)

    def fixed_point_config(self, threads: int | None = None) -> FixedPointConfig:
        fp = dataclasses.asdict(self.fixed_point)
        fp.pop("initial")
        fp.pop("initial_scale")
        return FixedPointConfig(**fp, threads=threads or self.threads)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _coerce(value, default):
    if isinstance(default, float) and not isinstance(default, bool):
        return float(value)
    return value


def _build_section(name: str, cls, raw, problems: list):
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected a table")
        return cls()
    proto = cls()
    kwargs = {}
    for key, value in raw.items():
        if not hasattr(proto, key):
            problems.append(f"{name}.{key}: unknown key")
            continue
        default = getattr(proto, key)
        if not _type_ok(value, default):
            problems.append(f"{name}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
            continue
        kwargs[key] = _coerce(value, default)
    return cls(**{**dataclasses.asdict(proto), **kwargs})


def config_from_dict(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Build and validate a config; every violated field is reported at once."""
    problems: list[str] = []
    top = {}
    for key, value in raw.items():
        if key in SECTIONS:
            continue
        if key not in TOP_LEVEL:
            problems.append(f"{key}: unknown key")
        elif not (isinstance(value, TOP_LEVEL[key]) and not isinstance(value, bool)):
            problems.append(f"{key}: expected {TOP_LEVEL[key].__name__}")
        else:
            top[key] = value
    if "seed" not in raw:
        problems.append("seed: required (no wall-clock default)")
    sections = {name: _build_section(name, cls, raw.get(name, {}), problems) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=top.pop("seed", 0), **top, **sections, base_dir=Path(base_dir))
    problems.extend(validate(cfg))
    if problems:
        raise ValidationError(problems)
    return cfg


def validate(cfg: ExperimentConfig) -> list[str]:
    """Semantic checks; returns one message per violated field, prefixed with its dotted name."""
    out = []
    if cfg.seed < 0:
        out.append("seed: must be >= 0")
    if cfg.threads < 1:
        out.append("threads: must be >= 1")
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        out.append(f"stages: unknown stage(s) {bad}; choose from {list(STAGES)}")
    m = cfg.model
    for key, msg in (("sigma", m.sigma > 0), ("cost_c", m.cost_c > 0), ("horizon_T", m.horizon_T > 0)):
        if not (msg and math.isfinite(getattr(m, key))):
            out.append(f"model.{key}: must be > 0")
    if not (m.sigma0 >= 0 and math.isfinite(m.sigma0)):
        out.append("model.sigma0: must be >= 0")
    r = cfg.reward
    if r.table:
        if not cfg.resolve(r.table).is_file():
            out.append(f"reward.table: file not found: {r.table}")
    elif r.template not in TEMPLATES:
        out.append(f"reward.template: unknown template {r.template!r}; choose from {sorted(TEMPLATES)}")
    if not out:
        try:
            cfg.reward_spec()
        except (TypeError, ValueError) as exc:
            out.append(f"reward.params: {exc}")
    fp = cfg.fixed_point
    try:
        cfg.fixed_point_config()
    except ValueError as exc:
        out.extend("fixed_point." + p.replace(" ", ": ", 1) for p in str(exc).split("; "))
    if fp.initial not in ("dirac", "normal"):
        out.append("fixed_point.initial: must be 'dirac' or 'normal'")
    if not fp.initial_scale > 0:
        out.append("fixed_point.initial_scale: must be > 0")
    n = cfg.nash
    if not n.N_values or not all(isinstance(v, int) and v >= 1 for v in n.N_values):
        out.append("nash.N_values: must be a non-empty list of integers >= 1")
    if n.reps < 0:
        out.append("nash.reps: must be >= 0")
    if n.deviators < 1:
        out.append("nash.deviators: must be >= 1")
    if n.family not in ("default", "none"):
        out.append("nash.family: must be 'default' or 'none'")
    if n.value_paths < 2:
        out.append("nash.value_paths: must be >= 2")
    if n.path_budget < 1:
        out.append("nash.path_budget: must be >= 1")
    cn = cfg.common_noise
    if cn.sigma0 < 0:
        out.append("common_noise.sigma0: must be >= 0")
    if cn.sigma0 and m.sigma0 and cn.sigma0 != m.sigma0:
        out.append("common_noise.sigma0: conflicts with model.sigma0")
    if "common-noise" in cfg.stages:
        if not cfg.common_sigma0 > 0:
            out.append("common_noise.sigma0: must be > 0 for the common-noise stage (or set model.sigma0)")
        if r.table or (r.template in TEMPLATES and r.template == "mixed"):
            out.append("reward: the common-noise stage needs a purely rank-based reward")
    if cn.w_count < 1:
        out.append("common_noise.w_count: must be >= 1")
    if cn.M < 2:
        out.append("common_noise.M: must be >= 2")
    if not cn.N_values or not all(isinstance(v, int) and v >= 1 for v in cn.N_values):
        out.append("common_noise.N_values: must be a non-empty list of integers >= 1")
    if cn.reps < 0:
        out.append("common_noise.reps: must be >= 0")
    vs = cfg.value_sweep
    if vs.measure not in ("equilibrium", "dirac") and not cfg.resolve(vs.measure).is_file():
        out.append(f"value_sweep.measure: file not found: {vs.measure}")
    if vs.t_count < 1 or vs.x_count < 1:
        out.append("value_sweep.t_count/x_count: must be >= 1")
    if not 0 < vs.t_max_fraction < 1:
        out.append("value_sweep.t_max_fraction: must lie in (0, 1)")
    if not vs.x_min <= vs.x_max:
        out.append("value_sweep.x_min: must be <= x_max")
    if not vs.fd_step > 0:
        out.append("value_sweep.fd_step: must be > 0")
    elif vs.t_max_fraction * m.horizon_T + 2 * vs.fd_step >= m.horizon_T and m.horizon_T > 0:
        out.append("value_sweep.fd_step: too large for t_max_fraction")
    needs_eq = {"verify-nash", "common-noise"} & set(cfg.stages) or (
        "value-sweep" in cfg.stages and vs.measure == "equilibrium")
    if needs_eq and "solve" not in cfg.stages:
        if cfg.equilibrium_file and not cfg.resolve(cfg.equilibrium_file).is_file():
            out.append(f"equilibrium_file: file not found: {cfg.equilibrium_file}")
    elif cfg.equilibrium_file and not cfg.resolve(cfg.equilibrium_file).is_file():
        out.append(f"equilibrium_file: file not found: {cfg.equilibrium_file}")
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError([f"{path}: {exc}"]) from None
    raw.update(overrides or {})
    return config_from_dict(raw, path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def _portable_dict(cfg: ExperimentConfig) -> dict:
    """Config as a dict with every referenced input file made absolute, for manifests."""
    d = cfg.to_dict()
    if cfg.reward.table:
        d["reward"]["table"] = str(cfg.resolve(cfg.reward.table).resolve())
    if cfg.equilibrium_file:
        d["equilibrium_file"] = str(cfg.resolve(cfg.equilibrium_file).resolve())
    if cfg.value_sweep.measure not in ("equilibrium", "dirac"):
        d["value_sweep"]["measure"] = str(cfg.resolve(cfg.value_sweep.measure).resolve())
    return d


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("threads")
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- manifest ------------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    seed: int
    stage_seeds: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # relative path -> sha256
    timing: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    threads: int = 1

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.status.values())

    def exit_code(self) -> int:
        if any(v == "failed" for v in self.status.values()):
            return EXIT_STAGE
        if any(v == "not-converged" for v in self.status.values()):
            return EXIT_NONCONVERGENCE
        return EXIT_OK

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# -- tables ----------------------------------------------------------------------------------


def emit_tables(results: dict, out_dir) -> list[Path]:
    """Write each result as comma-separated tables; returns the files in write order.

    ``results`` maps a stem to an EquilibriumResult, NashReport, CommonNoiseRun
    or a (header, rows) pair.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for stem in sorted(results):
        obj = results[stem]
        if hasattr(obj, "save"):
            files.extend(obj.save(out, stem))
        elif hasattr(obj, "to_csv"):
            files.append(obj.to_csv(out / f"{stem}.csv"))
        else:
            header, rows = obj
            path = out / f"{stem}.csv"
            with path.open("w") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row) + "\n")
            files.append(path)
    return files


# -- stages ------------------------------------------------------------------------------------


class StageFailure(Exception):
    pass


def _log_to(stream):
    return (lambda msg: print(msg, file=stream, flush=True)) if stream else None


def _stage_solve(cfg, seed, out, threads, log):
    params, reward = cfg.params, cfg.reward_spec()
    fpc = cfg.fixed_point_config(threads)
    fp = cfg.fixed_point
    mu0 = initial_measure(fp.initial, fp.M, seed, fp.initial_scale)
    res = solve_equilibrium(params, reward, fpc, seed, mu0, log=log)
    files = res.save(out, "equilibrium")
    status = "ok" if res.converged else "not-converged"
    return status, files, res.mu_star


def _equilibrium(cfg, out, state):
    if state.get("mu_star") is not None:
        return state["mu_star"]
    if cfg.equilibrium_file:
        return EmpiricalMeasure.load(cfg.resolve(cfg.equilibrium_file))
    path = Path(out) / EQUILIBRIUM_FILE
    if path.is_file():
        return EmpiricalMeasure.load(path)
    raise StageFailure("no equilibrium measure: run the solve stage or set equilibrium_file")


def _stage_nash(cfg, seed, out, threads, log, state):
    mu = _equilibrium(cfg, out, state)
    n = cfg.nash
    grid = cfg.fixed_point_config().grid(cfg.model.horizon_T)
    report = verify_nash(mu, cfg.params, cfg.reward_spec(), seed, N_values=tuple(n.N_values),
                         reps=n.reps or None, grid=grid, deviators=n.deviators,
                         deviations=n.family != "none", value_paths=n.value_paths,
                         path_budget=n.path_budget, threads=threads, log=log)
    return "ok", report.save(out, "nash")


def _stage_common(cfg, seed, out, threads, log, state):
    mu = _equilibrium(cfg, out, state)
    cn = cfg.common_noise
    reward = cfg.reward_spec()
    m = cfg.model
    params = ModelParams(m.sigma, cfg.common_sigma0, m.cost_c, m.horizon_T)
    grid = cfg.fixed_point_config().grid(m.horizon_T)
    run = conditional_fixed_point_check(mu, params, reward, cn.M, cn.w_count, seed, grid=grid, threads=threads)
    report = nplayer_common_noise_gap(mu, params, reward, seed, N_values=tuple(cn.N_values),
                                      reps=cn.reps or None, grid=grid, deviations=cn.deviations,
                                      value_paths=cfg.nash.value_paths, path_budget=cn.path_budget,
                                      threads=threads, log=log)
    files = [run.to_csv(Path(out) / "common_noise_conditional.csv")]
    summ = Path(out) / "common_noise_conditional_summary.json"
    summ.write_text(json.dumps(run.summary(), indent=2, sort_keys=True) + "\n")
    files.append(summ)
    files.extend(report.save(out, "common_noise_nash"))
    return "ok", files


SWEEP_HEADER = ("t", "x", "u", "u_x", "u_xx", "v", "v_x", "a_star", "residual")


def value_sweep_rows(field_: ValueField, ts, xs, fd_step: float) -> list[tuple]:
    rows = []
    xs = np.asarray(xs, dtype=float)
    for t in ts:
        u, ux, uxx = field_.u_derivatives(float(t), xs)
        v, vx, a = field_.value_and_drift(float(t), xs)
        res = pde_residual(field_, float(t), xs, fd_step)
        for k, x in enumerate(xs):
            rows.append((float(t), float(x), float(u[k]), float(ux[k]), float(uxx[k]), float(v[k]),
                         float(vx[k]), float(a[k]), float(res[k])))
    return rows


def _stage_sweep(cfg, seed, out, threads, log, state):
    vs = cfg.value_sweep
    if vs.measure == "dirac":
        mu = EmpiricalMeasure.dirac(0.0)
    elif vs.measure == "equilibrium":
        mu = _equilibrium(cfg, out, state)
    else:
        mu = EmpiricalMeasure.load(cfg.resolve(vs.measure))
    T = cfg.model.horizon_T
    ts = np.linspace(0.0, vs.t_max_fraction * T, vs.t_count)
    xs = np.linspace(vs.x_min, vs.x_max, vs.x_count)
    rows = value_sweep_rows(ValueField(cfg.params, cfg.reward_spec(), mu), ts, xs, vs.fd_step)
    return "ok", emit_tables({"value_sweep": (SWEEP_HEADER, rows)}, out)


def run_experiment(config, *, threads: int | None = None, out_dir=None, stages=None,
                   log_stream=sys.stderr) -> RunManifest:
    """Execute the configured stages in order and write all artifacts plus ``manifest.json``.

    A failing stage leaves a ``FAILED_<stage>`` marker, is recorded in the
    manifest, and stops the remaining stages.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    threads = threads or cfg.threads
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for marker in out.glob("FAILED_*"):
        marker.unlink()
    log = _log_to(log_stream)
    order = [s for s in STAGES if s in (stages or cfg.stages)]
    manifest = RunManifest(config_hash(cfg), __version__, cfg.seed, config=_portable_dict(cfg),
                           threads=threads)
    state: dict = {}
    produced: list[Path] = []
    for stage in order:
        seed = rng.derive_seed(cfg.seed, stage)
        manifest.stage_seeds[stage] = seed
        t0 = time.perf_counter()
        if log:
            log(f"[{stage}] seed {seed}")
        try:
            if stage == "solve":
                status, files, mu = _stage_solve(cfg, seed, out, threads, log)
                state["mu_star"] = mu
            elif stage == "verify-nash":
                status, files = _stage_nash(cfg, seed, out, threads, log, state)
            elif stage == "common-noise":
                status, files = _stage_common(cfg, seed, out, threads, log, state)
            else:
                status, files = _stage_sweep(cfg, seed, out, threads, log, state)
        except Exception as exc:  # stage errors abort the pipeline but keep earlier outputs
            (out / f"FAILED_{stage}").write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
            manifest.status[stage] = "failed"
            manifest.timing[stage] = time.perf_counter() - t0
            if log:
                log(f"[{stage}] failed: {exc}")
            break
        manifest.status[stage] = status
        manifest.timing[stage] = time.perf_counter() - t0
        produced.extend(files)
        if status != "ok":
            (out / f"FAILED_{stage}").write_text(f"{status}\n")
            break
    manifest.files = {p.name: _sha256(p) for p in produced}
    manifest.save(out)
    return manifest


def rerun_from_manifest(manifest_path, out_dir, *, threads: int = 1, log_stream=None) -> RunManifest:
    """Repeat a run from the configuration embedded in its manifest."""
    man = RunManifest.load(manifest_path)
    base = Path(manifest_path).parent
    raw = dict(man.config)
    cfg = config_from_dict(raw, base)
    return run_experiment(cfg, threads=threads, out_dir=out_dir, log_stream=log_stream)
