"""Command-line experiment driver.

Configs are flat ``key=value`` text with dotted keys grouped into blocks
(``sde.*``, ``data.*``, ``sampler.*`` and so on). Values come from an
optional ``--config`` file, then positional ``key=value`` arguments and
``--set`` flags in order, then ``--seed`` and ``--out``. Unknown keys and
out-of-range values are errors that name the offending field.

Example::

    sdelab task=sample sde.kind=VP data.name=bimodal_1d sampler.n=2000 --out runs/a
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import artifacts
from .benchmarks import DATASETS
from .conditional import Observation, as_score_fn, class_conditional_sample, impute
from .flow import OdeConfig, encode, identifiability_report, log_likelihood, ode_sample
from .metrics import ks_1d, median_bandwidth, mmd_rbf_mixture, moments, wasserstein1_1d
from .mixture import Gaussian, GaussianMixture, component_posterior, data_cdf, perturb_gmm
from .mixture import log_density as mixture_log_density
from .net import MlpScoreNet, Objective, TrainConfig, oracle_mse, train
from .samplers import DEFAULT_SNR, Corrector, PcConfig, Predictor, block_rng, pc_sample
from .sde import ParameterError, SdeKind, build_sde, kernel_match_report, variance_trajectory

TASKS = (
    "sample",
    "train",
    "likelihood",
    "encode",
    "decode",
    "impute",
    "condition",
    "kernel-check",
    "variance-check",
    "sampler-bench",
    "identifiability",
)

REQUIRED_BLOCKS = {
    "sample": ("sde", "data", "score", "sampler"),
    "train": ("sde", "data", "train"),
    "likelihood": ("sde", "data", "score", "ode", "likelihood"),
    "encode": ("sde", "data", "score", "ode", "encode"),
    "decode": ("sde", "data", "score", "ode", "decode"),
    "impute": ("sde", "data", "score", "sampler", "impute"),
    "condition": ("sde", "data", "sampler", "condition"),
    "kernel-check": ("sde", "kernel"),
    "variance-check": ("sde", "variance"),
    "sampler-bench": ("sde", "data", "sampler", "bench"),
    "identifiability": ("sde", "data", "train", "ode", "ident"),
}

# stream tags for draws made by the driver itself; samplers use their own
_TAG_DATA = 11
_TAG_REF = 12
_TAG_TRAIN = 13


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


# -- value types ---------------------------------------------------------------


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _parse_optfloat(s: str):
    return None if s.strip().lower() in ("none", "") else float(s)


def _parse_ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_floats(s: str):
    if s.strip().lower() == "none":
        return None
    return tuple(float(p) for p in s.split(",") if p.strip())


def _parse_matrix(s: str):
    if s.strip().lower() == "none":
        return None
    return tuple(tuple(float(p) for p in row.split(",") if p.strip()) for row in s.split(";"))


def _parse_optstr(s: str):
    return None if s.strip().lower() in ("none", "") else s.strip()


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(",".join(repr(x) for x in row) for row in v)
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], object]
    default: object
    choices: Optional[Tuple[str, ...]] = None
    lo: Optional[float] = None
    positive: bool = False
    help: str = ""


SCHEMA: Dict[str, Field] = {
    "task": Field(_parse_optstr, None, choices=TASKS),
    "seed": Field(int, 0, lo=0, help="64-bit master seed"),
    "out": Field(str, "out", help="output directory"),
    "sde.kind": Field(str, "VP", choices=("VE", "VP", "SubVP")),
    "sde.sigma_min": Field(float, 0.01, positive=True),
    "sde.sigma_max": Field(float, 50.0, positive=True),
    "sde.beta_min": Field(float, 0.1, positive=True),
    "sde.beta_max": Field(float, 20.0, positive=True),
    "sde.t_max": Field(float, 1.0, positive=True),
    "sde.eps_train": Field(float, 1e-5, positive=True),
    "sde.eps_sample": Field(_parse_optfloat, None, help="none: 1e-5 for VE, 1e-3 for VP and SubVP"),
    "data.name": Field(str, "bimodal_1d", choices=tuple(DATASETS) + ("custom",)),
    "data.separation": Field(float, 10.0, positive=True, help="separated_2d mean distance"),
    "data.rho": Field(float, 0.8, help="correlated_gaussian correlation"),
    "data.weights": Field(_parse_floats, None, help="custom mixture weights, comma separated"),
    "data.means": Field(_parse_matrix, None, help="custom means, rows separated by ';'"),
    "data.variances": Field(_parse_matrix, None, help="custom diagonal variances, rows separated by ';'"),
    "score.source": Field(str, "oracle", choices=("oracle", "checkpoint", "train")),
    "score.path": Field(_parse_optstr, None, help="checkpoint file for score.source=checkpoint"),
    "sampler.predictor": Field(str, "REVERSE_DIFFUSION", choices=tuple(p.value for p in Predictor)),
    "sampler.corrector": Field(str, "LANGEVIN", choices=tuple(c.value for c in Corrector)),
    "sampler.N": Field(int, 1000, lo=1),
    "sampler.M": Field(int, 1, lo=0),
    "sampler.snr": Field(_parse_optfloat, None, help="none: 0.16 for VE, 0.01 for VP and SubVP"),
    "sampler.denoise": Field(_parse_bool, True),
    "sampler.eps_sample": Field(_parse_optfloat, None, help="none: use sde.eps_sample"),
    "sampler.n": Field(int, 1000, lo=1),
    "ode.rtol": Field(float, 1e-5, positive=True),
    "ode.atol": Field(float, 1e-5, positive=True),
    "ode.max_steps": Field(int, 100_000, lo=1),
    "ode.n_probes": Field(int, 1, lo=1),
    "ode.probe": Field(str, "rademacher", choices=("rademacher", "gaussian")),
    "ode.exact_divergence": Field(_parse_bool, False),
    "train.objective": Field(str, "DSM_CONT", choices=tuple(o.value for o in Objective if o.value in ("DSM_CONT", "SSM"))),
    "train.iterations": Field(int, 5000, lo=1),
    "train.batch_size": Field(int, 256, lo=1),
    "train.lr": Field(float, 1e-3, lo=0),
    "train.hidden": Field(_parse_ints, (64, 64)),
    "train.embed_dim": Field(int, 32, lo=0),
    "train.fourier_scale": Field(float, 16.0, positive=True),
    "train.log_every": Field(int, 100, lo=1),
    "likelihood.n": Field(int, 100, lo=1, help="data points to evaluate"),
    "encode.n": Field(int, 64, lo=1, help="data points to encode"),
    "decode.n": Field(int, 1000, lo=1, help="prior draws to decode"),
    "impute.indices": Field(_parse_ints, (0,)),
    "impute.values": Field(_parse_floats, (1.0,)),
    "condition.label": Field(int, 0, lo=0),
    "kernel.N": Field(int, 1000, lo=2),
    "variance.points": Field(int, 101, lo=2),
    "variance.sigma0_sq": Field(float, 1.0, lo=0),
    "bench.N": Field(int, 100, lo=1, help="PC steps; predictor-only gets the same score budget"),
    "bench.bandwidth": Field(_parse_optfloat, None, help="RBF bandwidth; none: median heuristic"),
    "ident.n": Field(int, 64, lo=2),
    "ident.hidden_b": Field(_parse_ints, (128, 128), help="widths of the second net"),
}


def _coerce(key: str, raw: str):
    fld = SCHEMA[key]
    try:
        value = fld.parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None
    if fld.choices is not None and value is not None:
        match = [c for c in fld.choices if c.lower() == str(value).lower()]
        if not match:
            raise ConfigError(key, f"must be one of {', '.join(fld.choices)}; got {raw!r}")
        value = match[0]
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if fld.positive and not value > 0:
        raise ConfigError(key, f"must be positive, got {raw}")
    if fld.lo is not None and value < fld.lo:
        raise ConfigError(key, f"must be >= {fld.lo:g}, got {raw}")
    return value


# -- config ----------------------------------------------------------------------


class ExperimentConfig:
    """Validated flat config with defaults applied.

    Block builders (:meth:`sde`, :meth:`data`, :meth:`pc_config` and so on)
    turn the flat values into module-level objects.
    """

    def __init__(self, values: dict):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def __repr__(self):
        return f"ExperimentConfig(task={self.values.get('task')!r})"

    @property
    def task(self) -> str:
        return self.values["task"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in SCHEMA)

    def hash(self) -> str:
        """SHA-256 prefix of the resolved config, ignoring the output directory."""
        text = "".join(f"{k}={_fmt(self.values[k])}\n" for k in SCHEMA if k != "out")
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # block builders; module errors are re-raised with the dotted field name

    def _wrap(self, block: str, fn: Callable):
        try:
            return fn()
        except ConfigError:
            raise
        except ParameterError as exc:
            raise ConfigError(f"{block}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        except ValueError as exc:
            raise ConfigError(block, str(exc)) from None

    def sde(self):
        v = self.values
        params = {k: v[f"sde.{k}"] for k in ("sigma_min", "sigma_max", "beta_min", "beta_max", "t_max", "eps_train", "eps_sample")}
        return self._wrap("sde", lambda: build_sde(v["sde.kind"], **params))

    def data(self):
        v = self.values
        name = v["data.name"]
        if name == "separated_2d":
            return DATASETS[name](v["data.separation"])
        if name == "correlated_gaussian":
            if not -1 < v["data.rho"] < 1:
                raise ConfigError("data.rho", "must lie in (-1, 1)")
            return DATASETS[name](v["data.rho"])
        if name != "custom":
            return DATASETS[name]()
        for key in ("data.weights", "data.means", "data.variances"):
            if v[key] is None:
                raise ConfigError(key, "required for data.name=custom")
        w = np.asarray(v["data.weights"], dtype=float)
        if len({len(r) for r in v["data.means"]}) != 1:
            raise ConfigError("data.means", "all rows need the same length")
        means = np.asarray(v["data.means"], dtype=float)
        if means.shape[0] != w.size:
            raise ConfigError("data.means", f"need {w.size} rows, got {means.shape[0]}")
        d = means.shape[1]
        rows = v["data.variances"]
        if len(rows) != w.size or any(len(r) not in (1, d) for r in rows):
            raise ConfigError("data.variances", f"need {w.size} rows of 1 or {d} entries")
        var = np.array([np.broadcast_to(r, (d,)) for r in rows], dtype=float)
        return self._wrap("data", lambda: GaussianMixture(w, means, var))

    def pc_config(self, **overrides) -> PcConfig:
        v = self.values
        kwargs = dict(
            predictor=v["sampler.predictor"],
            corrector=v["sampler.corrector"],
            N=v["sampler.N"],
            M=v["sampler.M"],
            snr=v["sampler.snr"],
            denoise=v["sampler.denoise"],
            eps_sample=v["sampler.eps_sample"],
            n=v["sampler.n"],
            seed=v["seed"],
        )
        kwargs.update(overrides)
        cfg = self._wrap("sampler", lambda: PcConfig(**kwargs))
        sde = self.sde()
        self._wrap("sampler", lambda: cfg.check(sde))
        return cfg

    def ode_config(self) -> OdeConfig:
        v = self.values
        keys = ("rtol", "atol", "max_steps", "n_probes", "probe", "exact_divergence")
        return self._wrap("ode", lambda: OdeConfig(seed=v["seed"], **{k: v[f"ode.{k}"] for k in keys}))

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        v = self.values
        sde = self.sde()
        seed = _derived_seed(v["seed"], _TAG_TRAIN, seed_offset)
        return self._wrap(
            "train",
            lambda: TrainConfig(
                objective=v["train.objective"],
                iterations=v["train.iterations"],
                batch_size=v["train.batch_size"],
                lr=v["train.lr"],
                seed=seed,
                sde=sde,
                log_every=v["train.log_every"],
            ),
        )

    def new_net(self, dim: int, hidden=None, seed_offset: int = 0) -> MlpScoreNet:
        v = self.values
        hidden = v["train.hidden"] if hidden is None else hidden
        seed = _derived_seed(v["seed"], _TAG_TRAIN, 1000 + seed_offset)
        return self._wrap(
            "train",
            lambda: MlpScoreNet(dim, hidden, v["train.embed_dim"], v["train.fourier_scale"], sde=self.sde(), seed=seed),
        )

    def observation(self, dim: int) -> Observation:
        v = self.values
        if v["impute.values"] is None:
            raise ConfigError("impute.values", "required")
        obs = self._wrap("impute", lambda: Observation.mask(v["impute.indices"], v["impute.values"]))
        self._wrap("impute", lambda: obs.validate(dim))
        return obs

    def validate(self) -> None:
        """Build every block the task needs so that errors surface before any work."""
        task = self.task
        if task is None:
            raise ConfigError("task", "required; one of " + ", ".join(TASKS))
        blocks = REQUIRED_BLOCKS[task]
        sde = self.sde()
        model = self.data() if "data" in blocks else None
        if "sampler" in blocks:
            self.pc_config()
        if "ode" in blocks:
            self.ode_config()
        if "train" in blocks or ("score" in blocks and self.values["score.source"] == "train"):
            self.train_config()
            self.new_net(model.dim if model is not None else 1)
        if "score" in blocks and self.values["score.source"] == "checkpoint":
            path = self.values["score.path"]
            if path is None:
                raise ConfigError("score.path", "required for score.source=checkpoint")
            if not os.path.isfile(path):
                raise ConfigError("score.path", f"file not found: {path}")
        if task == "impute":
            self.observation(model.dim)
        if task == "condition":
            if not isinstance(model, GaussianMixture):
                raise ConfigError("data.name", "class conditioning needs a mixture")
            self._wrap("condition", lambda: Observation.class_label(self.values["condition.label"]).validate(model.dim, model.n_components))
        if task == "sampler-bench" and not isinstance(model, GaussianMixture):
            raise ConfigError("data.name", "sampler-bench needs a mixture reference")
        if task == "variance-check" and sde.kind is SdeKind.VE:
            raise ConfigError("sde.kind", "variance-check compares VP and SubVP; use VP or SubVP")


def _derived_seed(seed: int, tag: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), tag, int(index)]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def parse_assignments(items: Sequence[str], values: dict, origin: str = "argument") -> dict:
    for item in items:
        line = item.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(origin, f"expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    return values


def parse_config(path: Optional[str] = None, assignments: Sequence[str] = (), seed=None, out=None) -> ExperimentConfig:
    """Resolve a config from a file, ``key=value`` overrides and flags.

    Raises:
        ConfigError: On unknown keys, unparsable or out-of-range values, a
            missing file, or a block that fails its module's validation.
    """
    values = {k: f.default for k, f in SCHEMA.items()}
    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        parse_assignments(lines, values, origin="config")
    parse_assignments(assignments, values)
    if seed is not None:
        values["seed"] = _coerce("seed", str(seed))
    if out is not None:
        values["out"] = out
    config = ExperimentConfig(values)
    # pin SDE-dependent defaults so the printed config shows what runs
    sde = config.sde()
    if values["sde.eps_sample"] is None:
        values["sde.eps_sample"] = sde.eps_sample
    if values["sampler.snr"] is None:
        values["sampler.snr"] = DEFAULT_SNR[sde.kind]
    config = ExperimentConfig(values)
    config.validate()
    return config


# -- tasks -----------------------------------------------------------------------


class Run:
    """Output helpers bound to one config."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.seed = config.seed
        self.hash = config.hash()
        self.out = config["out"]
        os.makedirs(self.out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def csv(self, name, header, rows, comments=()):
        artifacts.write_csv(self.path(name), header, rows, self.seed, self.hash, comments)

    def json(self, name, payload):
        artifacts.write_json(self.path(name), payload, self.seed, self.hash)

    def svg(self, name, **kwargs):
        artifacts.emit_svg(self.path(name), seed=self.seed, config_hash=self.hash, **kwargs)


def _data_draws(config: ExperimentConfig, model, n: int) -> np.ndarray:
    return model.sample(n, block_rng(config.seed, 0, tag=_TAG_DATA))


def _train_net(config: ExperimentConfig, model, hidden=None, seed_offset: int = 0):
    net = config.new_net(model.dim, hidden, seed_offset)
    result = train(net, lambda n, rng: model.sample(n, rng), config.train_config(seed_offset))
    return net, result


def _score_fn(config: ExperimentConfig, model, sde):
    source = config["score.source"]
    if source == "oracle":
        return as_score_fn(model, sde)
    if source == "train":
        return _train_net(config, model)[0].score_fn()
    net = MlpScoreNet.load(config["score.path"])
    if net.dim != model.dim:
        raise ConfigError("score.path", f"checkpoint dimension {net.dim} differs from data dimension {model.dim}")
    if net.sde is not None and net.sde.kind is not sde.kind:
        raise ConfigError("score.path", f"checkpoint was trained for {net.sde.kind.value}, config uses {sde.kind.value}")
    return net.score_fn()


def _columns(prefix: str, d: int) -> List[str]:
    return [f"{prefix}_{j}" for j in range(d)]


def _sample_metrics(samples: np.ndarray, model) -> dict:
    mean, cov = moments(samples)
    out = {"n": samples.shape[0], "mean": mean, "cov": cov}
    if isinstance(model, GaussianMixture):
        out["reference_mean"] = model.weights @ model.means
        if samples.shape[1] == 1:
            d, p = ks_1d(samples[:, 0], data_cdf(model))
            out.update(ks_statistic=d, ks_pvalue=p, w1=wasserstein1_1d(samples[:, 0], data_cdf(model)))
    elif isinstance(model, Gaussian):
        out.update(reference_mean=model.mean, reference_cov=model.cov)
    return out


def _sample_report(run: Run, samples: np.ndarray, title: str) -> None:
    if samples.shape[1] >= 2:
        run.svg("report.svg", scatter=samples[:, :2], title=title, xlabel="x_0", ylabel="x_1")
        return
    counts, edges = np.histogram(samples[:, 0], bins=60, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    run.svg("report.svg", series=[("histogram", centers, counts)], title=title, xlabel="x", ylabel="density")


def task_sample(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    batch = pc_sample(sde, _score_fn(config, model, sde), config.pc_config(), dim=model.dim)
    run.csv("samples.csv", _columns("x", model.dim), batch.samples)
    metrics = _sample_metrics(batch.samples, model)
    metrics.update(nfe_per_sample=batch.nfe, sampler=batch.config)
    run.json("metrics.json", metrics)
    _sample_report(run, batch.samples, f"PC samples ({sde.kind.value})")
    return metrics


def task_train(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    net, result = _train_net(config, model)
    run.json("checkpoint.json", net.to_dict())
    run.csv("loss.csv", ["step", "loss"], zip(result.steps, result.losses))
    metrics = {"iterations": config["train.iterations"], "final_loss": result.losses[-1] if result.losses else None}
    if model.dim == 2:
        err, ref = oracle_mse(net.forward, as_score_fn(model, sde))
        metrics.update(oracle_mse=err, oracle_norm=ref, relative_mse=err / ref)
    run.json("metrics.json", metrics)
    run.svg("report.svg", series=[("loss", result.steps, result.losses)], title="training loss", xlabel="iteration", ylabel="loss")
    return metrics


def _reference_log_density(model, sde, x) -> Optional[np.ndarray]:
    if isinstance(model, GaussianMixture):
        return mixture_log_density(perturb_gmm(model, sde, 0.0), x)
    if isinstance(model, Gaussian):
        return model.log_density(sde, x, 0.0)
    return None


def task_likelihood(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    x = _data_draws(config, model, config["likelihood.n"])
    res = log_likelihood(x, _score_fn(config, model, sde), sde, config.ode_config())
    ref = _reference_log_density(model, sde, x)
    cols = _columns("x", model.dim) + ["log_prob", "bits_per_dim", "reference_log_prob"]
    run.csv("likelihood.csv", cols, np.column_stack([x, res.log_prob, res.bits_per_dim, ref]))
    payload = {
        "log_prob": res.log_prob,
        "bits_per_dim": res.bits_per_dim,
        "prior_term": res.prior_term,
        "divergence_integral": res.divergence_integral,
        "mean_nll": -float(np.mean(res.log_prob)),
        "mean_bits_per_dim": float(np.mean(res.bits_per_dim)),
        "reference_log_prob": ref,
        "max_abs_error": float(np.max(np.abs(res.log_prob - ref))),
        "nfe": res.nfe,
    }
    run.json("likelihood.json", payload)
    run.svg(
        "report.svg",
        scatter=np.column_stack([ref, res.log_prob]),
        series=[("identity", [ref.min(), ref.max()], [ref.min(), ref.max()])],
        title="log-likelihood vs exact",
        xlabel="exact log p",
        ylabel="ODE log p",
    )
    return payload


def task_encode(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    x = _data_draws(config, model, config["encode.n"])
    z = encode(x, _score_fn(config, model, sde), sde, config.ode_config())
    d = model.dim
    run.csv("latents.csv", _columns("x", d) + _columns("z", d), np.column_stack([x, z]))
    mean, cov = moments(z)
    payload = {"n": x.shape[0], "latent_mean": mean, "latent_cov": cov}
    run.json("metrics.json", payload)
    pts = z[:, :2] if d >= 2 else np.column_stack([x[:, 0], z[:, 0]])
    run.svg("report.svg", scatter=pts, title="latents", xlabel="z_0" if d >= 2 else "x", ylabel="z_1" if d >= 2 else "z")
    return payload


def task_decode(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    samples, nfe = ode_sample(sde, _score_fn(config, model, sde), config["decode.n"], config.seed, config.ode_config(), dim=model.dim)
    run.csv("samples.csv", _columns("x", model.dim), samples)
    metrics = _sample_metrics(samples, model)
    metrics["nfe"] = nfe
    run.json("metrics.json", metrics)
    _sample_report(run, samples, f"ODE samples ({sde.kind.value})")
    return metrics


def task_impute(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    obs = config.observation(model.dim)
    batch = impute(_score_fn(config, model, sde), sde, obs, config.pc_config(), dim=model.dim)
    known = set(obs.indices.tolist())
    mask = ",".join("1" if j in known else "0" for j in range(model.dim))
    run.csv("samples.csv", _columns("x", model.dim), batch.samples, comments=[f"mask={mask} (1 = observed, 0 = imputed)"])
    unknown = np.array([j for j in range(model.dim) if j not in known])
    mean, cov = moments(batch.samples[:, unknown])
    metrics = {"observed_indices": obs.indices, "observed_values": obs.values, "imputed_indices": unknown, "mean": mean, "cov": cov}
    if isinstance(model, Gaussian):
        ref_mean, ref_cov = model.conditional(obs.indices, obs.values)
        se = np.sqrt(np.diag(ref_cov) / batch.samples.shape[0])
        metrics.update(reference_mean=ref_mean, reference_cov=ref_cov, mean_z_score=(mean - ref_mean) / se)
    run.json("metrics.json", metrics)
    _sample_report(run, batch.samples, "imputation")
    return metrics


def task_condition(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    k = config["condition.label"]
    batch = class_conditional_sample(model, sde, k, config.pc_config())
    post = component_posterior(perturb_gmm(model, sde, 0.0), batch.samples)
    hit = float(np.mean(np.argmax(post, axis=1) == k))
    run.csv("samples.csv", _columns("x", model.dim), batch.samples, comments=[f"class_label={k}"])
    mean, cov = moments(batch.samples)
    metrics = {
        "label": k,
        "fraction_at_label": hit,
        "mean": mean,
        "cov": cov,
        "reference_mean": model.means[k],
        "reference_var": model.variances[k],
    }
    run.json("metrics.json", metrics)
    _sample_report(run, batch.samples, f"class {k} samples")
    return metrics


def task_kernel_check(config: ExperimentConfig, run: Run) -> dict:
    sde, N = config.sde(), config["kernel.N"]
    rep = kernel_match_report(sde, N)
    run.csv("kernel.csv", list(rep.COLUMNS), rep.rows())
    summary = rep.summary()
    doubled = kernel_match_report(sde, 2 * N).summary()
    summary["ratio_at_2N"] = {k: doubled[k] / summary[k] for k in summary if k.startswith("max_") and summary[k] > 0}
    summary["kind"] = sde.kind.value
    run.json("metrics.json", summary)
    run.svg(
        "report.svg",
        series=[("continuous std", rep.t, rep.continuous_std), ("discrete std", rep.t, rep.discrete_std)],
        title=f"perturbation kernel, N={N}",
        xlabel="t",
        ylabel="std",
    )
    return summary


def task_variance_check(config: ExperimentConfig, run: Run) -> dict:
    base = config.sde()
    s0 = config["variance.sigma0_sq"]
    params = dict(beta_min=base.beta_min, beta_max=base.beta_max, t_max=base.t_max, eps_train=base.eps_train)
    vp, sub = build_sde("VP", **params), build_sde("SubVP", **params)
    t = np.linspace(0.0, base.t_max, config["variance.points"])
    v_vp, v_sub = variance_trajectory(vp, s0, t), variance_trajectory(sub, s0, t)
    run.csv("variance.csv", ["t", "var_VP", "var_subVP"], zip(t, v_vp, v_sub))
    # equal at t=0 up to rounding
    excess = v_sub - v_vp
    bad = np.flatnonzero(excess > 1e-12)
    payload = {
        "sigma0_sq": s0,
        "max_subvp_minus_vp": float(excess.max()),
        "max_abs_vp_minus_one": float(np.max(np.abs(v_vp - 1.0))),
        "terminal_vp": float(v_vp[-1]),
        "terminal_subvp": float(v_sub[-1]),
        "subvp_le_vp": bool(bad.size == 0),
    }
    run.json("metrics.json", payload)
    run.svg("report.svg", series=[("VP", t, v_vp), ("SubVP", t, v_sub)], title="marginal variance", xlabel="t", ylabel="variance")
    if bad.size:
        raise RuntimeError(f"SubVP variance exceeds VP at t={t[bad[0]]:.17g}")
    return payload


def task_sampler_bench(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    score = as_score_fn(model, sde)
    N, M = config["bench.N"], config["sampler.M"]
    pc_cfg = config.pc_config(N=N, corrector="LANGEVIN", predictor="REVERSE_DIFFUSION")
    p_cfg = config.pc_config(N=N * (1 + M), corrector="NONE", predictor="REVERSE_DIFFUSION")
    h = config["bench.bandwidth"]
    if h is None:
        ref = model.sample(1000, block_rng(config.seed, 0, tag=_TAG_REF))
        h = median_bandwidth(ref, ref)
    rows, out = [], {"bandwidth": h, "reference": config["data.name"]}
    for name, cfg in (("pc", pc_cfg), ("predictor_only", p_cfg)):
        batch = pc_sample(sde, score, cfg)
        mmd2 = mmd_rbf_mixture(batch.samples, model, h)
        rows.append((name, cfg.N, cfg.M if cfg.corrector is Corrector.LANGEVIN else 0, batch.nfe, mmd2))
        out[name] = {"N": cfg.N, "nfe_per_sample": batch.nfe, "mmd2": mmd2}
    out["pc_better"] = out["pc"]["mmd2"] < out["predictor_only"]["mmd2"]
    run.csv("bench.csv", ["sampler", "N", "M", "nfe_per_sample", "mmd2"], rows)
    run.json("metrics.json", out)
    run.svg(
        "report.svg",
        series=[("MMD^2", [r[3] for r in rows], [r[4] for r in rows])],
        title="equal-budget sampler comparison",
        xlabel="score evaluations per sample",
        ylabel="MMD^2",
    )
    return out


def task_identifiability(config: ExperimentConfig, run: Run) -> dict:
    sde, model = config.sde(), config.data()
    net_a, _ = _train_net(config, model, seed_offset=0)
    net_b, _ = _train_net(config, model, hidden=config["ident.hidden_b"], seed_offset=1)
    x = _data_draws(config, model, config["ident.n"])
    rep = identifiability_report(net_a.score_fn(), net_b.score_fn(), x, sde, config.ode_config(), seed=config.seed)
    d = model.dim
    run.csv("latents.csv", _columns("x", d) + _columns("za", d) + _columns("zb", d), np.column_stack([x, rep["latents_a"], rep["latents_b"]]))
    payload = {
        "correlation": rep["correlation"],
        "min_correlation": float(np.min(rep["correlation"])),
        "shuffled_correlation": rep["shuffled_correlation"],
        "max_abs_shuffled_correlation": float(np.max(np.abs(rep["shuffled_correlation"]))),
        "max_abs_diff": rep["max_abs_diff"],
        "hidden_a": list(config["train.hidden"]),
        "hidden_b": list(config["ident.hidden_b"]),
    }
    run.json("metrics.json", payload)
    run.svg(
        "report.svg",
        scatter=np.column_stack([rep["latents_a"][:, 0], rep["latents_b"][:, 0]]),
        title="first latent coordinate, net A vs net B",
        xlabel="z_0 (A)",
        ylabel="z_0 (B)",
    )
    return payload


TASK_FUNCTIONS = {
    "sample": task_sample,
    "train": task_train,
    "likelihood": task_likelihood,
    "encode": task_encode,
    "decode": task_decode,
    "impute": task_impute,
    "condition": task_condition,
    "kernel-check": task_kernel_check,
    "variance-check": task_variance_check,
    "sampler-bench": task_sampler_bench,
    "identifiability": task_identifiability,
}


def run(config: ExperimentConfig) -> dict:
    """Execute the configured task and write its artifacts under ``config['out']``."""
    return TASK_FUNCTIONS[config.task](config, Run(config))


# -- entry point -----------------------------------------------------------------


def _help_epilog() -> str:
    lines = ["tasks and the config blocks they read:"]
    lines += [f"  {t:<16} {', '.join(REQUIRED_BLOCKS[t])}" for t in TASKS]
    lines.append("")
    lines.append("keys (default):")
    for key, f in SCHEMA.items():
        extra = f"  [{'|'.join(f.choices)}]" if f.choices else ""
        note = f"  {f.help}" if f.help else ""
        lines.append(f"  {key}={_fmt(f.default)}{extra}{note}")
    lines.append("")
    lines.append("SDELAB_THREADS caps the number of sampling worker threads.")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdelab",
        description="Score-based SDE experiments on Gaussian-mixture data.",
        epilog=_help_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("assignments", nargs="*", metavar="key=value", help="config overrides, e.g. task=sample")
    parser.add_argument("--config", metavar="PATH", help="file of key=value lines")
    parser.add_argument("--set", dest="sets", action="append", default=[], metavar="key=value", help="override one key (repeatable)")
    parser.add_argument("--seed", metavar="N", help="master seed")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def _error_line(kind: str, field: str, message: str) -> str:
    message = " ".join(str(message).split()).replace('"', "'")
    return f'sdelab: error kind={kind} field={field} message="{message}"'


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, list(args.assignments) + list(args.sets), args.seed, args.out)
    except ConfigError as exc:
        print(_error_line("config", exc.field, exc.message), file=sys.stderr)
        return 2
    if args.print_config:
        sys.stdout.write(config.to_text())
        return 0
    try:
        run(config)
    except ConfigError as exc:
        print(_error_line("config", exc.field, exc.message), file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as one parsable line
        print(_error_line(type(exc).__name__, config.task, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
