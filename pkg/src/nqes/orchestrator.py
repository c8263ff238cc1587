"""Config-driven training runs: phases, curriculum transforms, checkpoints.

A run is a list of phases.  Each phase trains the K networks on its own
model for a fixed number of SR iterations; an optional parameter transform
is applied when the phase starts.  After the last phase a longer sampling
pass estimates the spectrum and the requested observables.

Every random draw is keyed by (seed, global iteration, chain), and chains
continue from the configurations of the previous iteration, so a run that
is checkpointed and resumed reproduces the uninterrupted run exactly.

Config schema (JSON)::

    {
      "model": {"name": "tfim", "n": 10, "h": 1.0},      # target model
      "K": 4, "hidden_density": 4, "seed": 1,
      "sampler": {SamplerConfig fields},
      "optimizer": {SrConfig fields},
      "iterations": 500,                                 # single-phase shorthand
      "phases": [{"model": {...}, "iterations": 500, "transform": "identity"}, ...],
      "final_sampler": {SamplerConfig overrides for the measurement pass},
      "observables": ["zz_all_pairs", "xx_all_pairs", "z_sites", "x_sites"],
      "output_dir": "runs/tfim", "checkpoint_every": 100
    }
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import postprocess, sampler, sr
from .rbm import Rbm, RbmParams, apply_even_site_z, init_params
from .spins import build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TRANSFORMS = ("identity", "even_site_z")
OBSERVABLE_SETS = ("zz_all_pairs", "xx_all_pairs", "z_sites", "x_sites")


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class Phase:
    model: dict
    iterations: int
    transform: str = "identity"


@dataclass
class ExperimentConfig:
    model: dict
    K: int = 1
    hidden_density: float = 2.0
    seed: int = 0
    phases: list = field(default_factory=list)
    sampler: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    final_sampler: dict = field(default_factory=dict)
    observables: list = field(default_factory=list)
    output_dir: str | None = None
    checkpoint_every: int = 0
    base_dir: str | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.hidden_density <= 0:
            raise ConfigError("hidden_density must be > 0")
        phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if not phases:
            raise ConfigError("phase list is empty")
        for p in phases:
            if p.transform not in TRANSFORMS:
                raise ConfigError(f"unknown transform {p.transform!r}; known: {TRANSFORMS}")
            if p.iterations < 0:
                raise ConfigError("phase iterations must be >= 0")
        self.phases = phases
        for name in self.observables:
            if name not in OBSERVABLE_SETS:
                raise ConfigError(f"unknown observable set {name!r}; known: {OBSERVABLE_SETS}")
        try:
            self.sampler_config()
            self.final_sampler_config()
            self.sr_config()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        sizes = {self._build(p.model).n for p in phases} | {self._build(self.model).n}
        if len(sizes) != 1:
            raise ConfigError(f"phases disagree on the number of spins: {sorted(sizes)}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        if "phases" not in d:
            if "iterations" not in d:
                raise ConfigError("config needs 'phases' or 'iterations'")
            d["phases"] = [{"model": d["model"], "iterations": d.pop("iterations")}]
        else:
            d.pop("iterations", None)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if base_dir is not None and d.get("base_dir") is None:
            d["base_dir"] = str(base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = [asdict(p) for p in self.phases]
        return d

    def _build(self, spec):
        try:
            return build_model(spec, self.base_dir)
        except (KeyError, TypeError, ValueError, OSError) as err:
            raise ConfigError(f"bad model spec {spec}: {err}") from err

    def hamiltonian(self, spec=None):
        return self._build(self.model if spec is None else spec)

    @property
    def n(self) -> int:
        return self.hamiltonian().n

    @property
    def n_hidden(self) -> int:
        return max(1, int(round(self.hidden_density * self.n)))

    def sampler_config(self) -> sampler.SamplerConfig:
        d = dict(self.sampler)
        d.setdefault("seed", self.seed)
        return sampler.SamplerConfig(**d)

    def final_sampler_config(self) -> sampler.SamplerConfig:
        d = {**self.sampler, **self.final_sampler}
        d.setdefault("seed", self.seed)
        return sampler.SamplerConfig(**d)

    def sr_config(self) -> sr.SrConfig:
        return sr.SrConfig(**self.optimizer)


@dataclass
class RunState:
    phase: int
    iteration: int                  # iterations completed within the phase
    params: list                    # list[RbmParams]
    epoch: int = 0                  # global iteration counter (seeds the sampler)
    spins: list | None = None       # per-chain (K, n) arrays
    trace: list = field(default_factory=list)
    transformed: bool = False       # transform of the current phase applied
    diag_shift: float | None = None


def initial_networks(n: int, m: int, K: int, seed: int) -> list:
    return [init_params(n, m, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1 << 20, k))))
            for k in range(K)]


def curriculum_transition(state: RunState, transform: str) -> RunState:
    if transform == "identity":
        return state
    if transform == "even_site_z":
        state.params = [apply_even_site_z(p) for p in state.params]
        return state
    raise ConfigError(f"unknown transform {transform!r}")


def flat_params(params: list) -> np.ndarray:
    return np.concatenate([p.flatten() for p in params])


def unflatten(vec: np.ndarray, n: int, m: int, K: int) -> list:
    L = n + m + n * m
    return [RbmParams.from_vector(n, m, vec[k * L:(k + 1) * L]) for k in range(K)]


# ------------------------------------------------------------------ checkpoints


def _cplx(arr):
    arr = np.asarray(arr)
    return {"shape": list(arr.shape), "re": arr.real.ravel().tolist(), "im": arr.imag.ravel().tolist()}


def _uncplx(d):
    return (np.array(d["re"]) + 1j * np.array(d["im"])).reshape(d["shape"])


def save_checkpoint(path, config: ExperimentConfig, state: RunState):
    data = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "phase": state.phase,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "transformed": state.transformed,
        "diag_shift": state.diag_shift,
        "params": [{"a": _cplx(p.a), "b": _cplx(p.b), "w": _cplx(p.w)} for p in state.params],
        "spins": None if state.spins is None else [np.asarray(s).tolist() for s in state.spins],
        "trace": state.trace,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data))
    os.replace(tmp, path)


def load_checkpoint(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err
    if data.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {data.get('version')} is not {CHECKPOINT_VERSION}")
    config = ExperimentConfig.from_dict(data["config"])
    params = [RbmParams(_uncplx(p["a"]), _uncplx(p["b"]), _uncplx(p["w"])) for p in data["params"]]
    spins = None if data["spins"] is None else [np.array(s, dtype=np.int8) for s in data["spins"]]
    state = RunState(data["phase"], data["iteration"], params, data["epoch"], spins, data["trace"],
                     data["transformed"], data["diag_shift"])
    return config, state


# ------------------------------------------------------------------ running


def observable_set(names, n) -> dict:
    obs = {}
    for name in names:
        if name == "zz_all_pairs":
            obs.update(sampler.correlation_observables(n, "z"))
        elif name == "xx_all_pairs":
            obs.update(sampler.correlation_observables(n, "x"))
        elif name == "z_sites":
            obs.update({f"z[{i}]": sampler.SpinProduct("z", (i,)) for i in range(n)})
        elif name == "x_sites":
            obs.update({f"x[{i}]": sampler.SpinProduct("x", (i,)) for i in range(n)})
    return obs


def _threads():
    env = os.environ.get("NQES_THREADS")
    return int(env) if env else None


def train_iteration(config, state, H, scfg, sr_cfg, m):
    nets = [Rbm(p) for p in state.params]
    batch = sampler.run_chains(nets, H, None, scfg, epoch=state.epoch, start=state.spins,
                               threads=_threads())
    energy, err = postprocess.trace_energy(batch.e_loc, batch.chain)
    vec = flat_params(state.params)
    new, info = sr.sr_step(vec, batch, sr_cfg, state.epoch, state.diag_shift)
    if not np.all(np.isfinite(new)):
        raise NumericalError(f"non-finite parameters after iteration {state.epoch}")
    state.params = unflatten(new, H.n, m, len(state.params))
    state.spins = batch.final_spins
    record = {"phase": state.phase, "iteration": state.iteration, "epoch": state.epoch,
              "energy": energy, "stderr": err, "acceptance": batch.acceptance_rate,
              "singular_rejects": batch.singular_rejects, "krylov_iters": info.iters,
              "residual": info.residual, "skipped": info.skipped}
    state.trace.append(record)
    state.iteration += 1
    state.epoch += 1
    return record


def measure(config: ExperimentConfig, params: list, H, epoch: int, spins=None) -> dict:
    """Long sampling pass with observables; returns the report dictionary."""
    scfg = config.final_sampler_config()
    nets = [Rbm(p) for p in params]
    obs = observable_set(config.observables, H.n)
    batch = sampler.run_chains(nets, H, obs, scfg, epoch=epoch, start=spins,
                               record_derivs=False, threads=_threads())
    rep = postprocess.spectral_report(batch.e_loc, batch.chain)
    values = postprocess.observable_values(batch.e_loc, batch.obs, batch.chain)
    meta = {"config": config.to_dict(), "samples": batch.count,
            "acceptance": batch.acceptance_rate, "singular_rejects": batch.singular_rejects}
    report = postprocess.build_report(config.model, rep, values, H.n, meta)
    report["trace_energy"] = postprocess.trace_energy(batch.e_loc, batch.chain)
    return report


def run_experiment(config: ExperimentConfig, state: RunState | None = None,
                   output_dir=None, stop_after: int | None = None) -> dict:
    """Train through all phases, then measure.

    ``stop_after`` ends the run (after checkpointing) once that many global
    iterations are done; used to test exact resumption.
    """
    out = output_dir or os.environ.get("NQES_OUTPUT_DIR") or config.output_dir
    out = Path(out) if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json" if out else None
    n, m, K = config.n, config.n_hidden, config.K
    if state is None:
        state = RunState(0, 0, initial_networks(n, m, K, config.seed))
    scfg = config.sampler_config()
    sr_cfg = config.sr_config()
    try:
        while state.phase < len(config.phases):
            phase = config.phases[state.phase]
            H = config.hamiltonian(phase.model)
            if not state.transformed:
                if ckpt and phase.transform != "identity":
                    save_checkpoint(ckpt, config, state)
                curriculum_transition(state, phase.transform)
                state.transformed = True
                if ckpt:
                    save_checkpoint(ckpt, config, state)
            while state.iteration < phase.iterations:
                if stop_after is not None and state.epoch >= stop_after:
                    if ckpt:
                        save_checkpoint(ckpt, config, state)
                    return {"stopped_at": state.epoch, "trace": state.trace}
                rec = train_iteration(config, state, H, scfg, sr_cfg, m)
                log.info("phase %d iter %d  E = %.8f +- %.2e  acc %.3f  krylov %d  res %.2e",
                         rec["phase"], rec["iteration"], rec["energy"], rec["stderr"],
                         rec["acceptance"], rec["krylov_iters"], rec["residual"])
                if ckpt and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                    save_checkpoint(ckpt, config, state)
            state.phase += 1
            state.iteration = 0
            state.transformed = False
    except Exception:
        if ckpt:
            save_checkpoint(ckpt, config, state)
        raise
    if ckpt:
        save_checkpoint(ckpt, config, state)
    report = measure(config, state.params, config.hamiltonian(), state.epoch, state.spins)
    report["trace"] = state.trace
    if out:
        (out / "report.json").write_text(json.dumps(report, indent=1))
        with open(out / "trace.jsonl", "w") as fh:
            for rec in state.trace:
                fh.write(json.dumps(rec) + "\n")
        for axis, maps in report.get("correlations", {}).items():
            for k, C in enumerate(maps["values"]):
                postprocess.write_correlation_csv(out / f"corr_{axis}{axis}_state{k}.csv", np.array(C))
    return report


def resume(checkpoint_path, output_dir=None) -> dict:
    config, state = load_checkpoint(checkpoint_path)
    return run_experiment(config, state, output_dir or Path(checkpoint_path).parent)
