"""``rdae`` command line: generate, train, calibrate, score, stream, evaluate.

Exit status is 0 on success, 1 for invalid input (bad flags, config, plan,
files or band) and 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import checkpoint, detector, evaluator, imageio, synth, trainer
from .model import ConfigError, ModelConfig, build
from .tensor import RngState, ShapeError

logger = logging.getLogger("rdae")


class UsageError(ValueError):
    pass


# -- run configuration --------------------------------------------------------


@dataclass
class CorpusConfig:
    size: int = 128
    tool_count: int = 2
    drift: float = 1.0
    normal_count: int = 2000
    test_count: int = 0
    calibration_count: int = 0
    plan: str = ""


@dataclass
class RunConfig:
    """Everything a pipeline run depends on; round-trips through INI text."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    calibration: dict = field(default_factory=lambda: {"n_low": 1.0, "n_high": 99.0, "mode": detector.TWO_SIDED})
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def calibration_spec(self) -> detector.CalibrationSpec:
        c = self.calibration
        return detector.CalibrationSpec(float(c["n_low"]), float(c["n_high"]), c["mode"])

    def scene_spec(self) -> synth.SceneSpec:
        c = self.corpus
        return synth.SceneSpec(seed=self.seed, size=c.size, tool_count=c.tool_count, drift=c.drift)

    def train_config(self) -> trainer.TrainConfig:
        t = self.train
        t.seed = self.seed
        t.input_size = self.model.input_size
        return t

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        cp["model"] = {k: _fmt(v) for k, v in self.model.to_dict().items()}
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name)) for f in fields(self.train)
                       if f.name not in ("seed", "input_size")}
        cp["calibration"] = {k: _fmt(v) for k, v in self.calibration.items()}
        cp["corpus"] = {f.name: _fmt(getattr(self.corpus, f.name)) for f in fields(self.corpus)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "channels_per_level":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if key == "eval_subsample":
            return int(raw) if raw and raw.lower() != "none" else None
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section == "run":
        if key != "seed":
            raise UsageError(f"[run] {key}: unknown key")
        cfg.seed = _parse_value(section, key, raw, 0)
        return
    if section == "calibration":
        if key not in cfg.calibration:
            raise UsageError(f"[calibration] {key}: unknown key")
        cfg.calibration[key] = raw.strip() if key == "mode" else _parse_value(section, key, raw, 0.0)
        return
    target = {"model": cfg.model, "train": cfg.train, "corpus": cfg.corpus}.get(section)
    if target is None:
        raise UsageError(f"unknown config section [{section}]")
    if key not in {f.name for f in fields(target)} or (section == "train" and key in ("seed", "input_size")):
        raise UsageError(f"[{section}] {key}: unknown key")
    setattr(target, key, _parse_value(section, key, raw, getattr(target, key)))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file, then command-line overrides."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise UsageError(f"bad config file {path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                _apply(cfg, section, key, raw)
    for (section, key), raw in (overrides or {}).items():
        _apply(cfg, section, key, raw)
    cfg.model = ModelConfig(**cfg.model.to_dict())
    cfg.model.validate()
    cfg.train_config().validate()
    cfg.calibration_spec()
    return cfg


# (section, key, flag, help) for every overridable field
OVERRIDES = [
    ("run", "seed", "--seed", "master seed for every random choice"),
    ("model", "input_size", "--input-size", "model input side length S"),
    ("model", "levels", "--levels", "number of down/up-sampling levels"),
    ("model", "channels_per_level", "--channels", "comma-separated widths, one per level"),
    ("model", "units_per_level", "--units-per-level", "residual units per level"),
    ("model", "filter_size", "--filter-size", "convolution kernel size K (odd)"),
    ("model", "bn_momentum", "--bn-momentum", "batch-norm running-stat momentum"),
    ("model", "bn_eps", "--bn-eps", "batch-norm epsilon"),
    ("train", "learning_rate", "--learning-rate", "optimizer step size"),
    ("train", "batch_size", "--batch-size", "mini-batch size"),
    ("train", "max_epochs", "--max-epochs", "number of training epochs"),
    ("train", "optimizer", "--optimizer", "adam or sgd"),
    ("train", "eval_subsample", "--eval-subsample", "cap on frames in the per-epoch error pass"),
    ("train", "eval_batch_size", "--eval-batch-size", "batch size of the per-epoch error pass"),
    ("train", "record_time", "--record-time", "write wall-clock seconds into the history (true/false)"),
    ("calibration", "n_low", "--n-low", "lower percentile"),
    ("calibration", "n_high", "--n-high", "upper percentile"),
    ("calibration", "mode", "--mode", "two-sided or upper-only"),
    ("corpus", "size", "--size", "rendered frame side length"),
    ("corpus", "tool_count", "--tool-count", "number of moving tools in the scene"),
    ("corpus", "drift", "--drift", "scene motion speed multiplier"),
    ("corpus", "normal_count", "--normal-count", "number of training frames"),
    ("corpus", "test_count", "--test-count", "number of test frames (0 picks a default)"),
    ("corpus", "calibration_count", "--calibration-count", "number of all-normal calibration frames (0 for none)"),
    ("corpus", "plan", "--anomaly-plan", "kind:start:length[:intensity],..."),
]


def _dest(section: str, key: str) -> str:
    return f"cfg__{section}__{key}"


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (each flag overrides the config file)")
    g.add_argument("--config", help="INI config file with [run] [model] [train] [calibration] [corpus] sections")
    g.add_argument("--save-config", help="write the resolved config here")
    for section, key, flag, help_ in OVERRIDES:
        g.add_argument(flag, dest=_dest(section, key), help=help_)
    return p


def resolve(args) -> RunConfig:
    overrides = {}
    for section, key, _, _ in OVERRIDES:
        v = getattr(args, _dest(section, key), None)
        if v is not None:
            overrides[(section, key)] = v
    percentiles = getattr(args, "percentiles", None)
    if percentiles:
        parts = percentiles.split(",")
        if len(parts) != 2:
            raise UsageError(f"--percentiles expects LOW,HIGH, got {percentiles!r}")
        overrides[("calibration", "n_low")], overrides[("calibration", "n_high")] = parts
    cfg = load_config(args.config, overrides)
    text = cfg.to_ini()
    sys.stderr.write("# resolved config\n" + text)
    if args.save_config:
        Path(args.save_config).write_text(text, encoding="utf-8")
    return cfg


# -- helpers --------------------------------------------------------------------


def _load_model(path):
    try:
        return checkpoint.load_checkpoint(path).freeze()
    except FileNotFoundError:
        raise UsageError(f"checkpoint {path} not found") from None


def _frames_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"frame directory {p} does not exist")
    return p


def _errors_for(model, frames: np.ndarray, batch: int = 32) -> np.ndarray:
    if len(frames) == 0:
        return np.zeros(0)
    return np.concatenate([detector.batch_errors(model, frames[i : i + batch]) for i in range(0, len(frames), batch)])


def _verdict_line(score: detector.FrameScore, verdict: detector.Verdict, source: str = "") -> str:
    name = f" {source}" if source else ""
    return f"{score.frame_index}{name} rmse={score.rmse:.4f} {verdict.label} bound={verdict.bound}"


@dataclass(frozen=True)
class LatencyStats:
    frames: int
    min_ms: float
    median_ms: float
    p95_ms: float
    max_ms: float
    fps: float

    @classmethod
    def from_samples(cls, latencies_ms) -> "LatencyStats":
        v = np.sort(np.asarray(latencies_ms, dtype=np.float64))
        if v.size == 0:
            return cls(0, math.nan, math.nan, math.nan, math.nan, 0.0)
        median = float(np.median(v))
        p95 = detector.nearest_rank(v, 95.0)
        return cls(int(v.size), float(v[0]), median, max(p95, median), float(v[-1]),
                   1000.0 / median if median > 0 else math.inf)

    def line(self) -> str:
        return (f"latency frames={self.frames} min={self.min_ms:.2f}ms median={self.median_ms:.2f}ms "
                f"p95={self.p95_ms:.2f}ms max={self.max_ms:.2f}ms fps={self.fps:.1f}")

    def to_dict(self) -> dict:
        return {"frames": self.frames, "min_ms": self.min_ms, "median_ms": self.median_ms,
                "p95_ms": self.p95_ms, "max_ms": self.max_ms, "fps": self.fps}


# -- subcommands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve(args)
    plan = synth.parse_plan(cfg.corpus.plan)
    rows = synth.build_corpus(cfg.scene_spec(), cfg.corpus.normal_count, plan, args.out,
                              test_count=cfg.corpus.test_count or None,
                              calibration_count=cfg.corpus.calibration_count)
    anomalous = sum(r.label != synth.NORMAL for r in rows)
    print(f"wrote {cfg.corpus.normal_count} training, {cfg.corpus.calibration_count} calibration and "
          f"{len(rows)} test frames ({anomalous} anomalous) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args)
    corpus = Path(args.corpus)
    train_dir = corpus / "train" if (corpus / "train").is_dir() else corpus
    if not train_dir.is_dir():
        raise UsageError(f"training frames not found under {corpus}")
    data = imageio.ingest_directory(train_dir, cfg.model.input_size)
    model = build(cfg.model, RngState(cfg.seed))
    print(f"training on {len(data)} frames, {model.param_count()} parameters")
    result = trainer.fit(data.frames, model, cfg.train_config(), checkpoint_path=args.out_checkpoint,
                         progress=lambda h: print(f"epoch {h.epoch} mse={h.mean_mse:.6f} rmse={h.mean_rmse:.4f}",
                                                  flush=True))
    history = args.history or f"{os.fspath(args.out_checkpoint)}.history.csv"
    trainer.write_history(result.history, history)
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch} rmse={best.mean_rmse:.4f}; checkpoint {args.out_checkpoint}, "
          f"history {history}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = resolve(args)
    model = _load_model(args.checkpoint)
    data = imageio.ingest_directory(_frames_dir(args.normal_frames), model.config.input_size)
    errors = _errors_for(model, data.frames)
    band = detector.calibrate(errors, cfg.calibration_spec())
    detector.write_band(band, args.out_band)
    print(f"calibrated on {len(errors)} frames: mode={band.mode} lower={band.lower} upper={band.upper}")
    return 0


def cmd_score(args) -> int:
    resolve(args)
    model = _load_model(args.checkpoint)
    band = detector.read_band(args.band)
    paths = imageio.list_frames(_frames_dir(args.frames))
    flagged = errors = 0
    for item in detector.score_sequence(model, paths, band, trace_path=args.out_csv):
        if isinstance(item, detector.ErrorRecord):
            errors += 1
            logger.warning("frame %d (%s) unreadable: %s", item.frame_index, item.source, item.message)
        elif item[1].anomalous:
            flagged += 1
    print(f"scored {len(paths) - errors} frames, flagged {flagged}, unreadable {errors}; trace {args.out_csv}")
    return 0


def _follow(root: Path, poll: float, idle: float) -> Iterator[Path]:
    """Files of ``root`` in name order, then new arrivals until ``idle`` seconds pass without any."""
    seen: set[str] = set()
    last = time.monotonic()
    while True:
        fresh = [p for p in imageio.list_frames(root) if p.name not in seen]
        for p in fresh:
            seen.add(p.name)
            yield p
        if fresh:
            last = time.monotonic()
        elif time.monotonic() - last >= idle:
            return
        else:
            time.sleep(poll)


def _stdin_paths(stream) -> Iterator[Path]:
    for line in stream:
        line = line.strip()
        if line:
            yield Path(line)


def cmd_stream(args) -> int:
    resolve(args)
    model = _load_model(args.checkpoint)
    band = detector.read_band(args.band)
    if args.source_dir == "-":
        source = _stdin_paths(sys.stdin)
    elif args.follow:
        source = _follow(_frames_dir(args.source_dir), args.poll, args.idle_timeout)
    else:
        source = iter(imageio.list_frames(_frames_dir(args.source_dir)))
    size = model.config.input_size
    latencies = []
    out = sys.stdout
    for index, path in enumerate(source):
        t0 = time.perf_counter()
        try:
            frame = imageio.load_frame(path, size)
        except (OSError, imageio.ImageDecodeError, ValueError) as exc:
            out.write(f"{index} {path} error {exc}\n")
            out.flush()
            continue
        score = detector.score_frame(model, frame, index)
        verdict = detector.classify(score, band)
        latencies.append((time.perf_counter() - t0) * 1000.0)
        out.write(_verdict_line(score, verdict, os.fspath(path)) + "\n")
        out.flush()
    stats = LatencyStats.from_samples(latencies)
    out.write(stats.line() + "\n")
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    resolve(args)
    rows = detector.read_trace(args.scores_csv)
    manifest = synth.read_manifest(args.manifest)
    if len(rows) != len(manifest):
        raise UsageError(f"{args.scores_csv} has {len(rows)} rows but {args.manifest} has {len(manifest)}")
    for pos, r in enumerate(rows):
        if r.frame_index != pos:
            raise UsageError(f"score row {pos} has frame_index {r.frame_index}; expected {pos}")
    unreadable = sum(r.verdict == "error" for r in rows)
    if unreadable:
        logger.warning("%d unreadable frames counted as not flagged", unreadable)
    verdicts = [detector.ANOMALOUS if r.verdict == detector.ANOMALOUS else detector.NORMAL for r in rows]
    truth = [m.label for m in manifest]
    report = evaluator.per_category_report(verdicts, truth)
    text = evaluator.report_text(report)
    sys.stdout.write(text)
    bounds: dict[str, dict[str, int]] = {}
    for r, t in zip(rows, truth):
        if r.verdict == detector.ANOMALOUS:
            bounds.setdefault(t, {}).setdefault(r.bound, 0)
            bounds[t][r.bound] += 1
    for kind, counts in bounds.items():
        sys.stdout.write(f"flags by bound for {kind}: " +
                         " ".join(f"{b}={n}" for b, n in sorted(counts.items())) + "\n")
    out = Path(args.out_dir) if args.out_dir else Path(args.scores_csv).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(evaluator.report_csv(report), encoding="utf-8")
    (out / "confusion.csv").write_text(evaluator.confusion_csv(report.overall.cm), encoding="utf-8")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    p = argparse.ArgumentParser(prog="rdae", description="Residual autoencoder frame anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[parent], help="render a synthetic labeled corpus")
    g.add_argument("--out", required=True, help="output corpus directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[parent], help="train on a directory of normal frames")
    t.add_argument("--corpus", required=True, help="corpus directory (uses train/ when present)")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--history", help="history CSV path (default: <checkpoint>.history.csv)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[parent], help="fit a threshold band on normal frames")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--normal-frames", required=True, help="directory of normal frames")
    c.add_argument("--percentiles", help="LOW,HIGH (default 1,99)")
    c.add_argument("--out-band", required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("score", parents=[parent], help="score a frame directory into an error-trace CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--band", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--out-csv", required=True)
    s.set_defaults(func=cmd_score)

    st = sub.add_parser("stream", parents=[parent], help="score frames as they arrive and report latency")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--band", required=True)
    st.add_argument("--source-dir", required=True, help="frame directory, or - to read paths from stdin")
    st.add_argument("--follow", action="store_true", help="keep watching the directory for new frames")
    st.add_argument("--poll", type=float, default=0.1, help="seconds between directory polls")
    st.add_argument("--idle-timeout", type=float, default=2.0, help="stop following after this many idle seconds")
    st.add_argument("--stats", help="write latency statistics as JSON here")
    st.set_defaults(func=cmd_stream)

    e = sub.add_parser("evaluate", parents=[parent], help="metrics from an error trace and a manifest")
    e.add_argument("--scores-csv", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out-dir", help="where report.txt, report.csv and confusion.csv go")
    e.set_defaults(func=cmd_evaluate)
    return p


VALIDATION_ERRORS = (UsageError, ConfigError, synth.PlanError, detector.CalibrationError,
                     evaluator.EvaluationError, checkpoint.CheckpointError, ShapeError,
                     FileNotFoundError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except trainer.TrainingError as exc:
        print(f"rdae {args.command}: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"rdae {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"rdae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
