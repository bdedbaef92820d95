"""Command-line experiment runner.

Every verb reads the same TOML experiment file; relative paths in it are
resolved against the file's directory.  Artifacts go to ``--out`` (or
``[output] dir``)::

    ptmstruggle run --config exp.toml --out artifacts/

Failures print one line ``error: code=<CODE> stage=<verb> message=...`` and
exit 2 (input), 3 (training) or 4 (evaluation).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import tomli

from . import evalharness as ev
from .baselines import MODEL_NAMES
from .corpus import SyntheticConfig, fingerprint, generate_synthetic_corpus, load_corpus, write_corpus
from .encoders import EmbeddingCache, make_backend
from .errors import InputError, InvalidConfig, MissingFile, MissingInput, PTMError
from .experiment import CVResult, prepare, run_cv, summarize
from .labeling import canonicalize_tasks, label_corpus, lacking_concepts_table
from .plotting import emit_plots
from .ptm import TrainConfig, load_checkpoint, parameter_count, predict, write_loss_trace
from .tbpp import NORMALIZATIONS

log = logging.getLogger("ptmstruggle")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4
_STAGE_EXIT = {
    "ingest": EXIT_INPUT,
    "label": EXIT_INPUT,
    "synth": EXIT_INPUT,
    "train": EXIT_TRAIN,
    "evaluate": EXIT_EVAL,
    "sweep": EXIT_EVAL,
    "plot": EXIT_EVAL,
}


class ConfigNotFound(InputError):
    code = "CONFIG_NOT_FOUND"


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    dataset: Path | None
    data_format: str = "canonical-csv"
    language: str = "python"
    models: tuple = MODEL_NAMES
    reference: str = "ptm"
    train: TrainConfig = field(default_factory=TrainConfig)
    n_context: int = ev.N_CONTEXT
    n_targets: int = ev.N_TARGETS
    normalization: str = "per_skill_mean"
    k: int = 5
    split_seed: int = 0
    encoder: dict = field(default_factory=lambda: {"backend": "hashing", "dim": 64, "ngram": 2})
    cache_dir: Path | None = None
    sweep_lengths: tuple = tuple(range(1, ev.N_CONTEXT + 1))
    sweep_model: str = "ptm"
    bootstrap_resamples: int = 10000
    significance: float = 0.05
    bootstrap_seed: int = 0
    out: Path = Path("artifacts")
    epoch_checkpoints: bool = False
    synthetic: dict = field(default_factory=dict)
    source: Path | None = None

    def echo(self) -> dict:
        """JSON-safe view used in the manifest."""
        d = asdict(self)
        d["train"] = asdict(self.train)
        for key in ("dataset", "cache_dir", "out", "source"):
            d[key] = None if d[key] is None else str(d[key])
        d["models"] = list(self.models)
        d["sweep_lengths"] = list(self.sweep_lengths)
        return d


_SECTIONS = {
    "data": {"path", "format", "language"},
    "models": {"names", "reference"},
    "train": None,  # validated by TrainConfig.from_dict
    "protocol": {"n_context", "n_targets", "normalization"},
    "split": {"k", "seed"},
    "encoder": {"backend", "dim", "ngram", "model_name", "max_length", "pooling", "cache_dir"},
    "sweep": {"lengths", "model"},
    "evaluate": {"bootstrap_resamples", "alpha", "seed"},
    "output": {"dir", "epoch_checkpoints"},
    "synthetic": None,  # validated by SyntheticConfig
}


def _check_keys(raw: dict):
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise InvalidConfig(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise InvalidConfig(f"[{section}] must be a table")
        allowed = _SECTIONS[section]
        if allowed is not None and set(body) - allowed:
            raise InvalidConfig(f"unknown keys in [{section}]: {sorted(set(body) - allowed)}")


def load_config(path, seed: int | None = None, out=None) -> ExperimentConfig:
    """Parse and validate an experiment file; ``seed``/``out`` override the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFound(f"config file {path} not found")
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    _check_keys(raw)
    base = path.resolve().parent

    def resolve(p):
        return None if p in (None, "") else (base / p).resolve()

    data = raw.get("data", {})
    models = raw.get("models", {})
    protocol = raw.get("protocol", {})
    split = raw.get("split", {})
    enc = dict(raw.get("encoder", {}))
    sweep = raw.get("sweep", {})
    evaluate = raw.get("evaluate", {})
    output = raw.get("output", {})

    train = TrainConfig.from_dict(raw.get("train", {}))
    split_seed = int(split.get("seed", 0))
    boot_seed = int(evaluate.get("seed", 0))
    if seed is not None:
        train = replace(train, seed=seed)
        split_seed = boot_seed = seed

    cfg = ExperimentConfig(
        dataset=resolve(data.get("path")),
        data_format=data.get("format", "canonical-csv"),
        language=data.get("language", "python"),
        models=tuple(models.get("names", MODEL_NAMES)),
        reference=models.get("reference", "ptm"),
        train=train,
        n_context=int(protocol.get("n_context", ev.N_CONTEXT)),
        n_targets=int(protocol.get("n_targets", ev.N_TARGETS)),
        normalization=protocol.get("normalization", "per_skill_mean"),
        k=int(split.get("k", 5)),
        split_seed=split_seed,
        cache_dir=resolve(enc.pop("cache_dir", None)),
        encoder={"backend": "hashing", "dim": 64, "ngram": 2} if not enc else enc,
        sweep_lengths=tuple(int(x) for x in sweep.get("lengths", range(1, ev.N_CONTEXT + 1))),
        sweep_model=sweep.get("model", "ptm"),
        bootstrap_resamples=int(evaluate.get("bootstrap_resamples", 10000)),
        significance=float(evaluate.get("alpha", 0.05)),
        bootstrap_seed=boot_seed,
        out=Path(out) if out is not None else resolve(output.get("dir", "artifacts")),
        epoch_checkpoints=bool(output.get("epoch_checkpoints", False)),
        synthetic=dict(raw.get("synthetic", {})),
        source=path.resolve(),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    bad = [m for m in cfg.models if m not in MODEL_NAMES]
    if bad or not cfg.models:
        raise InvalidConfig(f"unknown model names {bad}; expected a subset of {list(MODEL_NAMES)}")
    if len(set(cfg.models)) != len(cfg.models):
        raise InvalidConfig("duplicate model names")
    if cfg.normalization not in NORMALIZATIONS:
        raise InvalidConfig(f"normalization must be one of {NORMALIZATIONS}")
    if cfg.k < 2 or cfg.n_context < 1 or cfg.n_targets < 1:
        raise InvalidConfig("need k >= 2, n_context >= 1 and n_targets >= 1")
    if any(not 1 <= n <= cfg.n_context for n in cfg.sweep_lengths):
        raise InvalidConfig(f"sweep lengths must lie in 1..{cfg.n_context}")
    if cfg.bootstrap_resamples < 1 or not 0 < cfg.significance < 1:
        raise InvalidConfig("bootstrap_resamples >= 1 and 0 < alpha < 1 required")
    if cfg.encoder.get("backend") not in ("hashing", "transformer"):
        raise InvalidConfig(f"unknown encoder backend {cfg.encoder.get('backend')!r}")
    if cfg.synthetic:
        _synthetic_config(cfg)


def _synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig:
    body = dict(cfg.synthetic)
    if "struggle_band" in body:
        body["struggle_band"] = tuple(body["struggle_band"])
    try:
        sc = SyntheticConfig(**body)
    except TypeError as exc:
        raise InvalidConfig(f"[synthetic]: {exc}") from None
    sc.validate()
    return sc


def _require_dataset(cfg: ExperimentConfig) -> Path:
    if cfg.dataset is None:
        raise InvalidConfig("[data] path is required")
    if not cfg.dataset.exists():
        raise MissingFile(f"dataset {cfg.dataset} does not exist")
    return cfg.dataset


def _backends(cfg: ExperimentConfig):
    opts = {k: v for k, v in cfg.encoder.items() if k != "backend"}
    backend = make_backend(cfg.encoder["backend"], **opts)
    return backend, backend, EmbeddingCache(cfg.cache_dir)


# ---------------------------------------------------------------------------
# Artifacts


def git_blob_sha1(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(cfg: ExperimentConfig):
    """Echo the config and hash every input and artifact file."""
    out = cfg.out
    inputs = {}
    if cfg.source is not None:
        inputs[str(cfg.source)] = git_blob_sha1(cfg.source)
    if cfg.dataset is not None and cfg.dataset.is_dir():
        for p in sorted(cfg.dataset.rglob("*")):
            if p.is_file():
                inputs[str(p)] = git_blob_sha1(p)
    artifacts = {
        p.relative_to(out).as_posix(): git_blob_sha1(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    _write_json({"config": cfg.echo(), "inputs": inputs, "artifacts": artifacts}, out / "manifest.json")


def verify_manifest(out) -> list:
    """Relative paths whose current content no longer matches the manifest."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    return [rel for rel, sha in manifest["artifacts"].items() if not (out / rel).is_file() or git_blob_sha1(out / rel) != sha]


def _write_labels(labels, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "task_id", "final_score", "attempts", "threshold", "rule", "struggling"])
        for (sid, tid), lp in sorted(labels.items()):
            threshold = "" if lp.threshold is None else lp.threshold
            w.writerow([sid, tid, repr(lp.outcome.final_score), lp.outcome.attempt_count, threshold,
                        lp.label.rule.value, int(lp.label.value)])


def _write_lacking(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["concept", "group", "n", "pct"])
        for concept, group, n, pct in rows:
            w.writerow([concept, group, n, repr(pct)])


def _write_splits(plan, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "fold"])
        for sid, fold in sorted(plan.folds.items()):
            w.writerow([sid, fold])


# ---------------------------------------------------------------------------
# Stages


class Pipeline:
    """Stage runner sharing the loaded corpus and prepared samples across verbs."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.stage = "ingest"
        self._corpus = None
        self._data = None
        cfg.out.mkdir(parents=True, exist_ok=True)

    @property
    def corpus(self):
        if self._corpus is None:
            self._corpus = canonicalize_tasks(load_corpus(_require_dataset(self.cfg), self.cfg.data_format))
        return self._corpus

    @property
    def data(self):
        if self._data is None:
            code_b, text_b, cache = _backends(self.cfg)
            self._data = prepare(self.corpus, code_b, text_b, cache, self.cfg.n_context, self.cfg.n_targets,
                                 self.cfg.train.max_attempts_per_task, self.cfg.normalization)
            log.info("%d students usable, %d excluded", len(self._data.samples), len(self._data.excluded))
        return self._data

    @property
    def plan(self):
        return ev.make_splits(self.data.samples, k=self.cfg.k, seed=self.cfg.split_seed)

    def ingest(self):
        self.stage = "ingest"
        c = self.corpus
        _write_json({
            "n_students": len(c.students),
            "n_tasks": len(c.tasks),
            "n_events": len(c.events),
            "fingerprint": fingerprint(c),
        }, self.cfg.out / "corpus_summary.json")

    def label(self):
        self.stage = "label"
        labels = label_corpus(self.corpus)
        _write_labels(labels, self.cfg.out / "labels.csv")
        _write_lacking(lacking_concepts_table(self.corpus, labels, self.cfg.language), self.cfg.out / "concept_lacking.csv")

    def synth(self):
        self.stage = "synth"
        corpus, _ = generate_synthetic_corpus(_synthetic_config(self.cfg))
        write_corpus(corpus, self.cfg.out / "corpus")

    def train(self):
        """Fit every model on every fold and persist checkpoints and loss traces."""
        self.stage = "train"
        data, cfg = self.data, self.cfg
        ckpt = cfg.out / "checkpoints"
        result = run_cv(data, list(cfg.models), cfg.train, k=cfg.k, split_seed=cfg.split_seed,
                        checkpoint_dir=ckpt, epoch_checkpoints=cfg.epoch_checkpoints)
        _write_splits(result.plan, cfg.out / "splits.csv")
        traces = cfg.out / "traces"
        traces.mkdir(exist_ok=True)
        for (name, fold), trace in sorted(result.traces.items()):
            write_loss_trace(trace, traces / f"{name}_fold{fold}.csv")
        return result

    def _load_models(self, names):
        models = {}
        for name in names:
            for fold in range(self.cfg.k):
                path = self.cfg.out / "checkpoints" / f"{name}_fold{fold}.npz"
                if not path.is_file():
                    raise MissingInput(f"checkpoint {path} not found; run the train stage first")
                models[(name, fold)] = load_checkpoint(path)[0]
        return models

    def _predict(self, model, samples):
        vocab = self.data.vocab if getattr(model, "uses_vocab", False) else None
        return predict(model, samples, vocab, max_attempts=self.cfg.train.max_attempts_per_task)

    def evaluate(self, result: CVResult | None = None):
        self.stage = "evaluate"
        cfg, plan = self.cfg, self.plan
        if result is None:
            models = self._load_models(cfg.models)
            result = CVResult(plan, {m: [] for m in cfg.models}, {}, models)
            for (name, fold), model in models.items():
                tests = [self.data.samples[s] for s in plan.test_students(fold)]
                result.records[name].extend(ev.records_for(name, fold, tests, self._predict(model, tests)))
                result.parameter_counts[name] = parameter_count(model)
        records = [r for name in cfg.models for r in sorted(result.records[name], key=lambda r: (r.fold, r.student_id, r.task_id))]
        ev.write_predictions(records, cfg.out / "predictions.csv")
        reference = cfg.reference if cfg.reference in cfg.models else cfg.models[0]
        metrics = summarize(result, reference=reference, bootstrap_B=cfg.bootstrap_resamples,
                            seed=cfg.bootstrap_seed, alpha=cfg.significance)
        metrics["data"] = {
            "n_students": len(self.data.samples),
            "n_excluded": len(self.data.excluded),
            "corpus_fingerprint": fingerprint(self.corpus),
        }
        _write_json(metrics, cfg.out / "metrics.json")
        return metrics

    def sweep(self, result: CVResult | None = None):
        self.stage = "sweep"
        cfg, plan = self.cfg, self.plan
        if cfg.sweep_model not in cfg.models:
            raise InvalidConfig(f"sweep model {cfg.sweep_model!r} is not among the configured models")
        models = result.models if result is not None else self._load_models([cfg.sweep_model])
        fold_tests = {f: [self.data.samples[s] for s in plan.test_students(f)] for f in range(cfg.k)}
        curve = ev.sensitivity_sweep(lambda f, samples: self._predict(models[(cfg.sweep_model, f)], samples),
                                     fold_tests, cfg.sweep_lengths)
        ev.write_sensitivity(curve, cfg.out / "sensitivity.csv")
        return curve

    def plot(self):
        self.stage = "plot"
        return emit_plots(self.cfg.out)

    def run(self):
        self.ingest()
        self.label()
        result = self.train()
        self.evaluate(result)
        self.sweep(result)
        self.plot()


VERBS = ("ingest", "label", "train", "evaluate", "sweep", "plot", "run", "synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptmstruggle", description="Struggle prediction experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "ingest": "validate the dataset and summarise it",
        "label": "write struggle labels and the lacking-concepts table",
        "train": "train every configured model on every fold",
        "evaluate": "score saved checkpoints and write metrics.json",
        "sweep": "context-length sensitivity of the sweep model",
        "plot": "render figures from the artifact CSVs",
        "run": "full pipeline: ingest, label, train, evaluate, sweep, plot",
        "synth": "write a synthetic corpus from the [synthetic] table",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb])
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override training, split and bootstrap seeds")
        p.add_argument("--out", default=None, help="artifact directory (overrides [output] dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error_line(code, stage, exc) -> str:
    message = " ".join(str(exc).split()) or type(exc).__name__
    return f"error: code={code} stage={stage} message={json.dumps(message)}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    pipe = None
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        pipe = Pipeline(cfg)
        getattr(pipe, args.verb)()
        write_manifest(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        stage = pipe.stage if pipe is not None else args.verb
        if isinstance(exc, InputError):
            status = EXIT_INPUT
        else:
            status = _STAGE_EXIT.get(stage, EXIT_INPUT)
            if not isinstance(exc, PTMError):
                log.debug("unhandled failure", exc_info=True)
        print(_error_line(getattr(exc, "code", "INTERNAL_ERROR"), stage, exc), file=sys.stderr)
        return status
    return EXIT_OK


def example_config() -> Path:
    """Path of the bundled example experiment (runs on the bundled fixture)."""
    return Path(str(resources.files("ptmstruggle") / "data" / "exp.toml"))


if __name__ == "__main__":
    sys.exit(main())
