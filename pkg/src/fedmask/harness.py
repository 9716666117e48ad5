"""Experiment orchestration: validated scenario configs, alpha/client-count
sweeps, attack batteries, mask-cancellation checks, and report emission.

Reports separate a header (timestamp, schema version) from the body; bodies
are byte-identical across reruns with the same config and seeds.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import adversary, fedcore, secagg
from .data import GLYPH_CLASSES, GLYPH_DIM, make_glyphs
from .models import TinyModel, accuracy, flatten, init_model, sgd_step, unflatten
from .models import Batch
from .numeric import ParameterError, Rng, uniform_mask, vec_mean

REPORT_SCHEMA_VERSION = 1
CSV_SCHEMA_VERSION = 1

KINDS = ("secagg_run", "attack_demo", "fed_training", "alpha_sweep", "clt_check")

# Sweep grid defaults: client counts and mask levels of the headline sweep.
DEFAULT_CLIENT_COUNTS = (10, 100, 1000)
DEFAULT_ALPHAS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0)


class ConfigError(ValueError):
    """Scenario configuration rejected; the message names the field."""


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "secagg_run"
    n: int = 3
    k: int = 2
    dim: int = 4
    alpha: float = 0.0
    alphas: tuple = DEFAULT_ALPHAS
    client_counts: tuple = DEFAULT_CLIENT_COUNTS
    strategy: str = "honest_but_curious"
    sybil_count: int = 0
    controlled_ids: tuple = ()
    retry_limit: int = 10
    round_size: int | None = None
    aggregator: str = "mean"
    aggregator_params: dict = field(default_factory=dict)
    dropout_after: dict = field(default_factory=dict)  # client id -> last round
    seeds: tuple = (0,)
    n_mask_seeds: int = 30  # seed battery for the cancellation check
    output_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment kind {self.kind!r}")
        if self.n < 2:
            raise ConfigError("n: need at least 2 clients")
        if not (1 <= self.k <= self.n):
            raise ConfigError(f"k: need 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.dim < 1:
            raise ConfigError("dim: must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha: must lie in [0, 1]")
        if not self.alphas:
            raise ConfigError("alphas: list must be nonempty")
        if any(not (0.0 <= a <= 1.0) for a in self.alphas):
            raise ConfigError("alphas: every entry must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("seeds: list must be nonempty")
        if self.strategy not in adversary.STRATEGIES:
            raise ConfigError(f"strategy: unknown strategy {self.strategy!r}")
        for cid, rnd in self.dropout_after.items():
            if not (0 <= int(cid) < self.n) or not (0 <= int(rnd) <= 4):
                raise ConfigError(f"dropout_after: bad entry {cid!r}: {rnd!r}")


_TUPLE_FIELDS = {"alphas", "client_counts", "controlled_ids", "seeds"}


def scenario_from_dict(data: dict) -> ScenarioConfig:
    """Build a config from parsed JSON; unknown keys are rejected by name."""
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    kwargs = dict(data)
    for name in _TUPLE_FIELDS & set(kwargs):
        kwargs[name] = tuple(kwargs[name])
    if "dropout_after" in kwargs:
        kwargs["dropout_after"] = {int(k): int(v) for k, v in kwargs["dropout_after"].items()}
    # the output directory is the one environment override
    env_out = os.environ.get("FEDMASK_OUTPUT_DIR")
    if env_out:
        kwargs["output_dir"] = env_out
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for name in _TUPLE_FIELDS:
        d[name] = list(d[name])
    d["dropout_after"] = {str(k): v for k, v in d["dropout_after"].items()}
    return d


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file: top level must be an object")
    return scenario_from_dict(data)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict  # config echo; reparsing it reproduces the run
    columns: tuple
    rows: list  # list of tuples matching columns
    summary: dict
    schema_version: int = REPORT_SCHEMA_VERSION

    def body_json(self) -> str:
        """Deterministic report body: identical configs give identical bytes."""
        return json.dumps(
            {
                "schema_version": self.schema_version,
                "config": self.config,
                "columns": list(self.columns),
                "rows": [list(r) for r in self.rows],
                "summary": self.summary,
            },
            sort_keys=True,
        )

    def to_json(self, timestamp: str = "") -> str:
        header = json.dumps({"timestamp": timestamp, "schema_version": self.schema_version})
        return header + "\n" + self.body_json()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# csv_schema={CSV_SCHEMA_VERSION}\n")
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(_csv_cell(c) for c in row) + "\n")
        return buf.getvalue()


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-report-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Mask-cancellation check
# ---------------------------------------------------------------------------


def clt_check(n: int, alpha: float, dim: int = 100, n_seeds: int = 30, seed: int = 0) -> dict:
    """Empirical std of the mean of n uniform masks vs alpha / sqrt(3 n).

    One mask per client per seed; the statistic pools the mean vector's
    coordinates across all seeds.
    """
    if n_seeds < 2:
        raise ParameterError("need at least 2 seeds")
    predicted = alpha / np.sqrt(3.0 * n)
    root = Rng(seed).child("clt", n, alpha)
    samples = []
    for s in range(n_seeds):
        srng = root.child("seed", s)
        masks = [uniform_mask(dim, alpha, srng.child("client", i)) for i in range(n)]
        samples.append(vec_mean(masks))
    pooled = np.concatenate(samples)
    empirical = float(np.std(pooled))
    rel_err = abs(empirical - predicted) / predicted if predicted > 0 else 0.0
    return {
        "n": n,
        "alpha": alpha,
        "dim": dim,
        "n_seeds": n_seeds,
        "predicted_std": float(predicted),
        "empirical_std": empirical,
        "rel_err": float(rel_err),
    }


# ---------------------------------------------------------------------------
# Glyph task baseline for the accuracy sweeps
# ---------------------------------------------------------------------------

GLYPH_MODEL_SIZES = (GLYPH_DIM, 32, GLYPH_CLASSES)
_BASELINE_CACHE: dict = {}


def glyph_eval_set(seed: int = 7):
    rng = Rng(seed).child("glyph-eval")
    return make_glyphs(20, rng)


def pretrained_glyph_model(seed: int = 7, steps: int = 800, eta: float = 0.5, clip: float = 0.1) -> TinyModel:
    """A small classifier trained to high accuracy on the bundled glyph task.

    Weights are clipped to [-clip, clip] after every step, keeping them on the
    scale of real deep networks' parameters so unit-scale additive masks are
    individually destructive while their client-average still cancels out.
    Deterministic and cached per hyperparameter tuple; sweeps reuse one model.
    """
    key = (seed, steps, eta, clip)
    if key in _BASELINE_CACHE:
        return _BASELINE_CACHE[key]
    rng = Rng(seed)
    inputs, labels = make_glyphs(30, rng.child("train-data"))
    model = init_model(GLYPH_MODEL_SIZES, activation="tanh", rng=rng.child("init"))
    n = inputs.shape[0]
    order_rng = rng.child("batches")
    for step in range(steps):
        idx = order_rng.choice(n, 32, replace=False)
        model = sgd_step(model, Batch(inputs=inputs[idx], labels=labels[idx]), eta, "cross_entropy")
        model = unflatten(model, np.clip(flatten(model), -clip, clip))
    _BASELINE_CACHE[key] = model
    return model


# ---------------------------------------------------------------------------
# Sweeps and batteries
# ---------------------------------------------------------------------------


def masked_global_cell(model: TinyModel, n: int, alpha: float, eval_inputs, eval_labels, rng: Rng):
    """One sweep cell: n masked copies of the model, their mean, accuracies.

    Local accuracy is averaged over at most 50 sampled clients to keep large
    n affordable; the global model always averages all n masks.
    """
    w = flatten(model)
    masks = [uniform_mask(w.shape[0], alpha, rng.child("client", i)) for i in range(n)]
    global_model = unflatten(model, w + vec_mean(masks))
    global_acc = accuracy(global_model, eval_inputs, eval_labels)
    probe = range(n) if n <= 50 else [int(i) for i in rng.child("probe").choice(n, 50)]
    local_accs = [accuracy(unflatten(model, w + masks[i]), eval_inputs, eval_labels) for i in probe]
    return float(np.mean(local_accs)), float(global_acc)


def alpha_sweep(cfg: ScenarioConfig) -> ExperimentReport:
    """Client-count x alpha accuracy grid on the glyph task.

    Per (n, alpha): mean local accuracy of masked client models and accuracy
    of their average, seed-averaged; plus the per-n tolerance (largest alpha
    whose global accuracy stays within 2 points of the unmasked baseline).
    """
    model = pretrained_glyph_model()
    eval_inputs, eval_labels = glyph_eval_set()
    baseline = accuracy(model, eval_inputs, eval_labels)
    rows = []
    tolerance = {}
    for n in cfg.client_counts:
        for alpha in cfg.alphas:
            locals_, globals_ = [], []
            for s in cfg.seeds:
                rng = Rng(s).child("sweep", n, alpha)
                la, ga = masked_global_cell(model, n, alpha, eval_inputs, eval_labels, rng)
                locals_.append(la)
                globals_.append(ga)
            mean_local = float(np.mean(locals_))
            mean_global = float(np.mean(globals_))
            rows.append((n, float(alpha), mean_local, mean_global))
            if mean_global >= baseline - 0.02:
                tolerance[n] = max(tolerance.get(n, 0.0), float(alpha))
    return ExperimentReport(
        config=scenario_to_dict(cfg),
        columns=("n", "alpha", "mean_local_accuracy", "global_accuracy"),
        rows=rows,
        summary={
            "baseline_accuracy": float(baseline),
            "tolerance_by_n": {str(n): tolerance.get(n, 0.0) for n in cfg.client_counts},
        },
    )


def _scenario_inputs(cfg: ScenarioConfig, seed: int):
    rng = Rng(seed).child("inputs")
    return [rng.child(i).uniform(-1.0, 1.0, cfg.dim) for i in range(cfg.n)]


def _strategy_from_config(cfg: ScenarioConfig) -> adversary.AdversaryStrategy:
    return adversary.AdversaryStrategy(
        kind=cfg.strategy,
        sybil_count=cfg.sybil_count,
        controlled_ids=tuple(cfg.controlled_ids),
        retry_limit=cfg.retry_limit,
        round_size=cfg.round_size,
    )


def attack_battery(cfg: ScenarioConfig) -> ExperimentReport:
    """Run the configured adversary strategy across the seed battery."""
    strategy = _strategy_from_config(cfg)
    rows = []
    successes = 0
    for s in cfg.seeds:
        scenario = adversary.AttackScenario(inputs=tuple(_scenario_inputs(cfg, s)), k=cfg.k, seed=s)
        report = adversary.run_attack(scenario, strategy)
        rows.append((cfg.strategy, s, report.success, len(report.recovered), report.rounds_consumed))
        successes += int(report.success)
    return ExperimentReport(
        config=scenario_to_dict(cfg),
        columns=("strategy", "seed", "success", "recovered_count", "rounds"),
        rows=rows,
        summary={"success_rate": successes / len(cfg.seeds)},
    )


def secagg_report(cfg: ScenarioConfig) -> ExperimentReport:
    rows = []
    max_dev = 0.0
    aborts = 0
    for s in cfg.seeds:
        inputs = _scenario_inputs(cfg, s)
        transcript = secagg.run_secagg(inputs, cfg.k, seed=s, dropout_after=cfg.dropout_after)
        if transcript.aborted:
            aborts += 1
            rows.append((s, True, transcript.abort_reason, float("nan")))
            continue
        expected = np.sum([inputs[i] for i in transcript.included], axis=0)
        dev = float(np.max(np.abs(transcript.aggregate - expected)))
        max_dev = max(max_dev, dev)
        rows.append((s, False, "", dev))
    return ExperimentReport(
        config=scenario_to_dict(cfg),
        columns=("seed", "aborted", "abort_reason", "max_deviation"),
        rows=rows,
        summary={"aborts": aborts, "max_deviation": max_dev},
    )


def fed_training_report(cfg: ScenarioConfig) -> ExperimentReport:
    from .data import partition

    model = pretrained_glyph_model()
    eval_inputs, eval_labels = glyph_eval_set()
    rows = []
    for s in cfg.seeds:
        rng = Rng(s)
        inputs, labels = make_glyphs(10, rng.child("data"))
        parts = partition(inputs, labels, cfg.n, rng.child("partition"))
        fed_cfg = fedcore.FedConfig(
            n_clients=cfg.n,
            alpha=cfg.alpha,
            aggregator=cfg.aggregator,
            aggregator_params=dict(cfg.aggregator_params),
            seed=s,
        )
        trained = fedcore.run_fedavg(model, parts, fed_cfg, rng.child("fed"))
        rows.append((s, accuracy(trained, eval_inputs, eval_labels)))
    return ExperimentReport(
        config=scenario_to_dict(cfg),
        columns=("seed", "global_accuracy"),
        rows=rows,
        summary={"mean_accuracy": float(np.mean([r[1] for r in rows]))},
    )


def clt_report(cfg: ScenarioConfig) -> ExperimentReport:
    rows = []
    worst = 0.0
    for n in cfg.client_counts:
        for alpha in cfg.alphas:
            if alpha == 0.0:
                continue
            cell = clt_check(n, alpha, dim=cfg.dim, n_seeds=cfg.n_mask_seeds, seed=cfg.seeds[0])
            rows.append((n, alpha, cell["predicted_std"], cell["empirical_std"], cell["rel_err"]))
            worst = max(worst, cell["rel_err"])
    return ExperimentReport(
        config=scenario_to_dict(cfg),
        columns=("n", "alpha", "predicted_std", "empirical_std", "rel_err"),
        rows=rows,
        summary={"max_rel_err": worst},
    )


def run_scenario(cfg: ScenarioConfig) -> ExperimentReport:
    """Dispatch a validated scenario to its implementation."""
    dispatch = {
        "secagg_run": secagg_report,
        "attack_demo": attack_battery,
        "fed_training": fed_training_report,
        "alpha_sweep": alpha_sweep,
        "clt_check": clt_report,
    }
    report = dispatch[cfg.kind](cfg)
    if cfg.output_dir:
        base = os.path.join(cfg.output_dir, f"{cfg.kind}-report")
        from datetime import datetime, timezone

        stamp = datetime.now(timezone.utc).isoformat()
        write_atomic(base + ".json", report.to_json(timestamp=stamp))
        write_atomic(base + ".csv", report.to_csv())
    return report
