# trainer.py
"""
Joint recognition + adversarial domain training.

One optimizer step per batch on L_r + L_d, where the discriminator sees the
encoder output through the gradient reversal layer: theta_d descends L_d while
theta_e receives -lambda times its gradient, so the min-max objective is
realized by a single backward pass.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import ConcatDataset

import htr_constants as C
from adversary import DomainClassifier
from config import RunConfig, resolve_out, save_run_config
from datakit import (LABEL_AUDIT, Charset, DatasetManifest, DomainBatch, DomainBatcher,
                     LabeledBatcher, ManifestImages, Split, TokenSeq, load_charset, load_manifest)
from errors import ConfigError, ExhaustedStream, IncompatibleCharset, LengthMismatch, NaNLoss
from evalkit import evaluate_images
from ml_utils import (Checkpoint, check_compatible, load_backbone_weights, load_checkpoint,
                      load_module_state, restore_rng_state, save_checkpoint)
from recognizer import WordRecognizer
from synthgen import Domain

logger = logging.getLogger("synth2real-htr.trainer")


# -----------------------
# Losses and lambda schedule
# -----------------------
def recognition_loss(logits: torch.Tensor, target: Union[TokenSeq, torch.Tensor],
                     pad_id: Optional[int] = None) -> torch.Tensor:
    """Mean per-character cross-entropy up to and including END; PAD positions excluded."""
    if isinstance(target, TokenSeq):
        target = torch.tensor(target.ids, dtype=torch.long, device=logits.device)
    target = target.to(logits.device)
    if tuple(logits.shape[:-1]) != tuple(target.shape):
        raise LengthMismatch(f"logits rows {tuple(logits.shape[:-1])} vs target {tuple(target.shape)}")
    ignore = pad_id if pad_id is not None else -100
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), ignore_index=ignore)


def domain_loss(logits: torch.Tensor, labels: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    """Mean binary cross-entropy; label 1 = source, 0 = target."""
    labels = torch.as_tensor(labels).to(device=logits.device, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise LengthMismatch(f"{tuple(logits.shape)} domain logits vs {tuple(labels.shape)} labels")
    return F.binary_cross_entropy_with_logits(logits, labels)


@dataclass(frozen=True)
class LambdaSchedule:
    kind: str = "constant"
    horizon: int = 10

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "exponential"):
            raise ValueError(f"Unknown lambda schedule '{self.kind}'")
        if self.horizon < 1:
            raise ValueError(f"lambda horizon must be >= 1, got {self.horizon}")


def lambda_value(s: LambdaSchedule, epoch: float) -> float:
    """epoch may be fractional (epoch + batch / batches); progress is clamped at the horizon."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if s.kind == "constant":
        return 1.0
    p = min(epoch / s.horizon, 1.0)
    if s.kind == "linear":
        return p
    return 2.0 / (1.0 + math.exp(-C.EXP_LAMBDA_GAMMA * p)) - 1.0


# -----------------------
# State
# -----------------------
@dataclass
class LossBundle:
    L_r: float
    L_d: Optional[float]
    lambda_: float
    grad_norm: float = 0.0
    clipped: bool = False
    mixed: bool = True

    @property
    def total(self) -> float:
        return self.L_r - self.lambda_ * (self.L_d or 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {"L_r": self.L_r, "L_d": self.L_d, "lambda": self.lambda_, "clipped": self.clipped}


@dataclass
class TrainState:
    recognizer: WordRecognizer
    classifier: Optional[DomainClassifier]
    optimizer: torch.optim.Optimizer
    mode: str
    epoch: int = 0
    step: int = 0
    batch_index: int = 0
    best_cer: float = math.inf
    clip_events: int = 0
    single_domain_batches: int = 0

    def parameters(self) -> List[torch.nn.Parameter]:
        params = list(self.recognizer.parameters())
        if self.classifier is not None:
            params += list(self.classifier.parameters())
        return params

    def progress(self) -> Dict[str, Any]:
        return {"epoch": self.epoch, "step": self.step, "batch_index": self.batch_index,
                "best_cer": self.best_cer, "clip_events": self.clip_events,
                "single_domain_batches": self.single_domain_batches}

    def restore_progress(self, progress: Dict[str, Any]) -> None:
        for key in ("epoch", "step", "batch_index", "clip_events", "single_domain_batches"):
            setattr(self, key, int(progress.get(key, 0)))
        self.best_cer = float(progress.get("best_cer", math.inf))

    def train(self) -> None:
        self.recognizer.train()
        if self.classifier is not None:
            self.classifier.train()


def build_state(cfg: RunConfig, cs: Charset, init: Optional[Checkpoint] = None) -> TrainState:
    """
    Fresh model, optionally initialized from a source-only checkpoint.
    The optimizer carries over the recognizer moments of `init`; theta_d is
    always freshly initialized.
    """
    torch.manual_seed(cfg.seed)
    mode = cfg.train.mode
    recognizer = WordRecognizer(cs, cfg.model)
    if cfg.model.pretrained_backbone and init is None:
        load_backbone_weights(recognizer.encoder.backbone, cfg.model.pretrained_backbone)
    recognizer.to(cfg.train.device)
    optimizer = torch.optim.Adam(recognizer.parameters(), lr=cfg.train.learning_rate)

    if init is not None:
        check_compatible(init, cs, cfg)
        load_module_state(recognizer, init.recognizer, "recognizer")
        if init.optimizer and len(init.optimizer.get("param_groups", [])) >= 1:
            state = dict(init.optimizer)
            groups = state["param_groups"][:1]
            keep = set(groups[0]["params"])
            state = {"state": {k: v for k, v in state["state"].items() if k in keep},
                     "param_groups": groups}
            optimizer.load_state_dict(state)
            for group in optimizer.param_groups:
                group["lr"] = cfg.train.learning_rate
        logger.info("Initialized recognizer from %s", init.path)

    classifier = None
    if mode == "unsup_adapt":
        classifier = DomainClassifier(cfg.adversary, recognizer.encoder.feature_dim,
                                      recognizer.encoder.conv_channels)
        classifier.reset_parameters(seed=cfg.seed)
        classifier.to(cfg.train.device)
        optimizer.add_param_group({"params": list(classifier.parameters())})
    return TrainState(recognizer, classifier, optimizer, mode)


def _dump_nan(dump_dir: Optional[Path], state: TrainState, batch: DomainBatch,
              terms: Dict[str, float], lambda_: float) -> Optional[str]:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"nan_dump_step{state.step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "step": state.step, "epoch": state.epoch, "mode": state.mode, "lambda": lambda_,
        "losses": terms, "widths": batch.widths.tolist(),
        "domain_labels": batch.domain_labels.tolist(), "item_ids": batch.item_ids,
    }, indent=2), encoding="utf-8")
    return str(path)


def train_step(state: TrainState, batch: DomainBatch, lambda_: float = 1.0,
               grad_clip_norm: float = C.GRAD_CLIP_NORM, dump_dir: Optional[Path] = None):
    """One optimizer update. Returns (state, LossBundle)."""
    state.train()
    rec = state.recognizer
    state.optimizer.zero_grad(set_to_none=True)

    H = rec.encode(batch.images, batch.widths)
    total = H.values.new_zeros(())
    L_r = None
    labeled_rows = np.flatnonzero(batch.labeled)
    if labeled_rows.size:
        targets = torch.as_tensor(batch.token_targets[labeled_rows], device=rec.device)
        logits = rec.forward_teacher_forced(H.select(torch.as_tensor(labeled_rows)), targets)
        L_r = recognition_loss(logits, targets, rec.pad_id)
        total = total + L_r

    L_d = None
    if state.mode == "unsup_adapt":
        if not batch.is_mixed:
            state.single_domain_batches += 1
            logger.warning("Step %d: batch holds a single domain (%d source, %d target)",
                           state.step, batch.n_source, batch.n_target)
        d_logits = state.classifier(H, lambda_)
        L_d = domain_loss(d_logits, batch.domain_labels)
        total = total + L_d

    terms = {"L_r": L_r.item() if L_r is not None else None, "L_d": L_d.item() if L_d is not None else None}
    if not torch.isfinite(total):
        path = _dump_nan(dump_dir, state, batch, terms, lambda_)
        raise NaNLoss(f"non-finite loss at step {state.step}: {terms}", path)
    if L_r is None and L_d is None:
        raise ExhaustedStream(f"step {state.step}: batch has no labeled items and no domain loss")

    total.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(state.parameters(), grad_clip_norm))
    clipped = grad_norm > grad_clip_norm
    if clipped:
        state.clip_events += 1
        logger.debug("Step %d: gradient norm %.3f clipped to %g", state.step, grad_norm, grad_clip_norm)
    state.optimizer.step()
    state.step += 1
    bundle = LossBundle(terms["L_r"] or 0.0, terms["L_d"], lambda_ if L_d is not None else 0.0,
                        grad_norm, clipped, batch.is_mixed)
    return state, bundle


# -----------------------
# Streams
# -----------------------
def _split_or_all(manifest: DatasetManifest, split: Split) -> DatasetManifest:
    chosen = manifest.select(split)
    return chosen if len(chosen) else manifest


@dataclass
class Streams:
    source: Optional[Sequence] = None
    target: Optional[Sequence] = None
    val: Optional[Sequence] = None


def prepare_streams(cfg: RunConfig) -> Streams:
    """Source/target/validation WordImage sequences as the mode needs them."""
    h = cfg.data.canonical_height
    paths = cfg.paths
    tr = cfg.train
    streams = Streams()
    source_needed = tr.mode != "sup_adapt" or tr.mix_source_in_sup_adapt
    if source_needed and paths.source_manifest:
        source = _split_or_all(load_manifest(paths.source_manifest), Split.TRAIN)
        limit = tr.source_limit
        if limit is None and tr.target_writer is not None:
            limit = C.WRITER_ADAPT_SOURCE_WORDS
        if limit is not None:
            source = source.subset(limit, cfg.seed)
        streams.source = ManifestImages(source, Domain.SOURCE, h)
    if tr.mode != "source_only" and paths.target_manifest:
        target = _split_or_all(load_manifest(paths.target_manifest), Split.TRAIN)
        if tr.target_writer is not None:
            target = target.for_writer(tr.target_writer)
            if len(target) == 0:
                raise ConfigError(f"target manifest has no images of writer '{tr.target_writer}'")
        if tr.target_limit is not None:
            target = target.subset(tr.target_limit, cfg.seed)
        streams.target = ManifestImages(target, Domain.TARGET, h)
    if paths.val_manifest:
        val = _split_or_all(load_manifest(paths.val_manifest), Split.VAL)
        if tr.target_writer is not None and len(val.for_writer(tr.target_writer)):
            val = val.for_writer(tr.target_writer)
        streams.val = ManifestImages(val, Domain.TARGET, h)
    return streams


def make_batcher(cfg: RunConfig, cs: Charset, source, target):
    tr = cfg.train
    bs = cfg.data.batch_size
    if tr.mode == "source_only":
        if source is None:
            raise ConfigError("source_only training needs a source stream")
        return LabeledBatcher(source, cs, bs, cfg.seed, tr.online_augment)
    if tr.mode == "unsup_adapt":
        if source is None or target is None:
            raise ConfigError("unsup_adapt needs both a source and a target stream")
        return DomainBatcher(source, target, cs, bs, cfg.seed, tr.online_augment)
    if target is None:
        raise ConfigError("sup_adapt needs a labeled target stream")
    images = ConcatDataset([target, source]) if tr.mix_source_in_sup_adapt and source is not None else target
    return LabeledBatcher(images, cs, bs, cfg.seed, tr.online_augment)


def resolve_charset(cfg: RunConfig, ckpt: Optional[Checkpoint]) -> Charset:
    cs = load_charset(cfg.paths.charset) if cfg.paths.charset else None
    if ckpt is not None:
        if cs is not None and cs.fingerprint() != ckpt.charset.fingerprint():
            raise IncompatibleCharset(f"{cfg.paths.charset} differs from the charset stored in {ckpt.path}")
        return ckpt.charset
    if cs is None:
        raise ConfigError("training needs paths.charset (written by gensynth) or an init checkpoint")
    return cs


# -----------------------
# Loop
# -----------------------
@dataclass
class TrainResult:
    out_dir: str
    best_checkpoint: Optional[str]
    last_checkpoint: str
    metrics_log: str
    history: List[LossBundle] = field(default_factory=list)
    validations: List[Dict[str, Any]] = field(default_factory=list)
    label_reads: int = 0
    final_step: int = 0


class MetricsLog:
    """Append-only JSON-lines log ordered by global step."""

    def __init__(self, path: Path, append: bool):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if not append and path.exists():
            path.unlink()

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _validate(state: TrainState, cfg: RunConfig, cs: Charset, val) -> Dict[str, float]:
    report = evaluate_images(state.recognizer, cs, val, cfg.eval, cfg.data.max_transcript_len)
    return {"cer": report.cer, "wer": report.wer}


def train_loop(cfg: RunConfig, source_stream=None, target_stream=None, val_stream=None,
               cs: Optional[Charset] = None) -> TrainResult:
    """
    Train per cfg.train.mode. Streams default to the manifests named in cfg.paths.
    Writes best.pt (by validation CER), last.pt, metrics.jsonl and run_config.json
    into cfg.paths.out_dir.
    """
    tr = cfg.train
    if source_stream is None and target_stream is None:
        cfg.check_mode_requirements()
    if tr.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)

    resume = load_checkpoint(tr.resume_from) if tr.resume_from else None
    init = None
    if tr.init_checkpoint and not tr.adapt_from_scratch and resume is None:
        init = load_checkpoint(tr.init_checkpoint)
    cs = cs or resolve_charset(cfg, resume or init)

    if source_stream is None and target_stream is None:
        streams = prepare_streams(cfg)
        source_stream, target_stream = streams.source, streams.target
        val_stream = val_stream if val_stream is not None else streams.val
    batcher = make_batcher(cfg, cs, source_stream, target_stream)
    n_batches = len(batcher)

    state = build_state(cfg, cs, init)
    if resume is not None:
        check_compatible(resume, cs, cfg)
        if resume.mode != tr.mode:
            raise ConfigError(f"cannot resume a {resume.mode} run in mode {tr.mode}")
        load_module_state(state.recognizer, resume.recognizer, "recognizer")
        if state.classifier is not None:
            load_module_state(state.classifier, resume.discriminator or {}, "discriminator")
        if resume.optimizer:
            state.optimizer.load_state_dict(resume.optimizer)
        state.restore_progress(resume.progress)
        restore_rng_state(resume.rng)
        logger.info("Resumed %s at epoch %d, batch %d, step %d", resume.path, state.epoch,
                    state.batch_index, state.step)

    out_dir = resolve_out(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, str(out_dir / "run_config.json"))
    log = MetricsLog(out_dir / "metrics.jsonl", append=resume is not None)
    log.write({"type": "header", "config": cfg.echo(), "charset_fingerprint": cs.fingerprint(),
               "resumed_from": tr.resume_from, "n_batches_per_epoch": n_batches})
    schedule = LambdaSchedule(tr.lambda_schedule, tr.horizon)
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    result = TrainResult(str(out_dir), str(best_path) if best_path.exists() else None, str(last_path),
                         str(log.path))

    def checkpoint(path: Path) -> None:
        save_checkpoint(str(path), cfg, cs, state.recognizer, state.classifier, state.optimizer,
                        state.progress())

    reads_before = LABEL_AUDIT.reads
    stop = False
    logger.info("Training %s: %d batches/epoch, epochs %d..%d", tr.mode, n_batches, state.epoch, tr.epochs - 1)
    while state.epoch < tr.epochs and not stop:
        epoch = state.epoch
        sums = {"L_r": 0.0, "L_d": 0.0, "n": 0, "clipped": 0}
        lam = lambda_value(schedule, epoch)
        batches: Iterator[DomainBatch] = batcher.batches(epoch, start=state.batch_index)
        while True:
            with LABEL_AUDIT.watching():
                batch = next(batches, None)
                if batch is None:
                    break
                lam = lambda_value(schedule, epoch + state.batch_index / n_batches)
                _, bundle = train_step(state, batch, lam, tr.grad_clip_norm, out_dir)
            state.batch_index += 1
            result.history.append(bundle)
            sums["L_r"] += bundle.L_r
            sums["L_d"] += bundle.L_d or 0.0
            sums["n"] += 1
            sums["clipped"] += int(bundle.clipped)
            if tr.log_every_steps and state.step % tr.log_every_steps == 0:
                log.write({"type": "step", "step": state.step, **bundle.to_dict()})
            if tr.checkpoint_every_steps and state.step % tr.checkpoint_every_steps == 0:
                checkpoint(last_path)
            if tr.max_steps is not None and state.step >= tr.max_steps:
                stop = True
                break
        if state.batch_index >= n_batches:
            state.epoch += 1
            state.batch_index = 0

        metrics = _validate(state, cfg, cs, val_stream) if val_stream is not None and len(val_stream) else {}
        n = max(sums["n"], 1)
        record = {"type": "val", "epoch": epoch, "step": state.step, "cer": metrics.get("cer"),
                  "wer": metrics.get("wer"), "L_r": sums["L_r"] / n,
                  "L_d": sums["L_d"] / n if tr.mode == "unsup_adapt" else None, "lambda": lam,
                  "clip_events": sums["clipped"]}
        log.write(record)
        result.validations.append(record)
        if metrics and metrics["cer"] < state.best_cer:
            state.best_cer = metrics["cer"]
            checkpoint(best_path)
            result.best_checkpoint = str(best_path)
        logger.info("Epoch %d step %d: L_r %.4f L_d %s lambda %.3f val CER %s WER %s", epoch, state.step,
                    record["L_r"], "-" if record["L_d"] is None else f"{record['L_d']:.4f}", lam,
                    "-" if record["cer"] is None else f"{record['cer']:.2f}",
                    "-" if record["wer"] is None else f"{record['wer']:.2f}")

    checkpoint(last_path)
    result.label_reads = LABEL_AUDIT.reads - reads_before
    result.final_step = state.step
    if tr.mode == "unsup_adapt" and result.label_reads:
        logger.error("%d target transcripts were read during unsup_adapt steps", result.label_reads)
    if state.clip_events:
        logger.info("Gradient clipping triggered on %d steps", state.clip_events)
    return result
