"""Multi-task pre-training: batching, the three forward procedures, optimisation, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TASKS, TrainConfig
from .data import (
    TokenSequence,
    Vocabulary,
    build_vocab,
    center_crop_resize,
    load_image,
    patchify,
    read_manifest,
    tokenize,
)
from .errors import CheckpointConfigError, CheckpointIntegrityError
from .model import M3AE
from .nn import Module
from .objectives import (
    LossReport,
    apply_image_mask,
    apply_text_mask,
    decode_language,
    decode_vision,
    image_mask_array,
    image_targets,
    itm_loss,
    mim_loss,
    mlm_loss,
    sample_itm_pairs,
    sample_mask_plan,
    select_representation,
    text_targets,
)
from .optim import AdamW, AdamWState, LrSchedule, ParamGroup
from .transformer import ModelConfig, pool

UNIMODAL_PREFIXES = ("embeddings.", "vision_encoder.", "text_encoder.")
FUSION_PREFIXES = ("fusion.", "vision_decoder.", "language_decoder.", "itm_head.", "heads.", "head.")


# -- data -------------------------------------------------------------------


@dataclass
class Sample:
    patches: np.ndarray  # (N, P*P*C)
    ids: np.ndarray  # (M + 2,) with specials
    caption: str


@dataclass
class Batch:
    patches: np.ndarray  # (B, N, P*P*C)
    ids: np.ndarray  # (B, M + 2)
    captions: list[str]

    def __len__(self) -> int:
        return len(self.captions)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> Batch:
        if not samples:
            raise ValueError("empty batch")
        lengths = {len(s.ids) for s in samples}
        if len(lengths) != 1:
            raise ValueError(f"batch mixes text lengths {sorted(lengths)}; bucket by length first")
        return cls(
            patches=np.stack([s.patches for s in samples]).astype(np.float32),
            ids=np.stack([s.ids for s in samples]).astype(np.int64),
            captions=[s.caption for s in samples],
        )


def prepare_image(raw: np.ndarray, config: ModelConfig) -> np.ndarray:
    img = center_crop_resize(raw, config.image_side)
    if img.shape[2] != config.channels:
        if config.channels == 1:
            img = img.mean(axis=2, keepdims=True)
        else:
            img = np.repeat(img[:, :, :1], config.channels, axis=2)
    return patchify(img, config.patch).patches.astype(np.float32)


def prepare_text(caption: str, vocab: Vocabulary, config: ModelConfig) -> np.ndarray:
    ids = tokenize(caption, vocab).with_specials
    cap = config.max_text_len + 2
    if len(ids) > cap:
        ids = np.concatenate([ids[: cap - 1], ids[-1:]])
    return ids


class PairDataset:
    """Image-caption pairs held in memory, bucketed by text length."""

    def __init__(self, samples: list[Sample]):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = samples
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            buckets.setdefault(len(s.ids), []).append(i)
        self.buckets = [buckets[k] for k in sorted(buckets)]

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_manifest(cls, path, vocab: Vocabulary, config: ModelConfig, limit: int | None = None) -> PairDataset:
        records = read_manifest(path)[:limit]
        return cls([
            Sample(prepare_image(load_image(img), config), prepare_text(cap, vocab, config), cap)
            for img, cap in records
        ])

    def batch(self, indices: Sequence[int]) -> Batch:
        return Batch.from_samples([self.samples[i] for i in indices])

    def sample_batch(self, batch_size: int, seed: int, step: int) -> Batch:
        rng = np.random.default_rng([seed, step, 7])
        sizes = np.array([len(b) for b in self.buckets], dtype=float)
        bucket = self.buckets[int(rng.choice(len(self.buckets), p=sizes / sizes.sum()))]
        take = min(batch_size, len(bucket))
        chosen = rng.choice(len(bucket), size=take, replace=False)
        return self.batch([bucket[i] for i in chosen])


def vocab_from_manifest(path, max_size: int = 30000, extra_texts: Sequence[str] = ()) -> Vocabulary:
    return build_vocab([cap for _, cap in read_manifest(path)] + list(extra_texts), max_size)


# -- parameter groups -------------------------------------------------------


def group_of(name: str) -> str:
    if name.startswith(UNIMODAL_PREFIXES):
        return "unimodal"
    if name.startswith(FUSION_PREFIXES):
        return "fusion"
    raise ValueError(f"parameter {name!r} belongs to no learning-rate group")


def build_param_groups(model: Module, config: TrainConfig) -> list[ParamGroup]:
    """Encoders and embeddings at the uni-modal rate, everything else at the fusion rate."""
    members: dict[str, dict] = {"unimodal": {}, "fusion": {}}
    for name, p in model.named_parameters():
        members[group_of(name)][name] = p
    return [
        ParamGroup("unimodal", members["unimodal"], LrSchedule(config.lr_unimodal, config.total_steps, config.warmup_ratio)),
        ParamGroup("fusion", members["fusion"], LrSchedule(config.lr_fusion, config.total_steps, config.warmup_ratio)),
    ]


def make_optimizer(model: Module, config: TrainConfig) -> AdamW:
    return AdamW(build_param_groups(model, config), weight_decay=config.weight_decay)


# -- one training step ------------------------------------------------------


@dataclass
class ForwardRecord:
    """What one forward procedure consumed; filled only when a recorder is passed."""

    step: int
    name: str
    patches: np.ndarray
    image_masked: np.ndarray  # (B, N + 1) bool
    ids: np.ndarray


def plan_seed(seed: int, step: int, kind: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, step, kind, index]).generate_state(1)[0])


@dataclass
class StepLosses:
    losses: dict[str, T.Tensor]
    counts: dict[str, int]
    total: T.Tensor | None


def compute_losses(
    batch: Batch,
    model: M3AE,
    step: int,
    config: TrainConfig,
    recorder: list[ForwardRecord] | None = None,
) -> StepLosses:
    """Run the MLM, MIM and ITM forwards and form the weighted total.

    The uni-modal encodings of the *unmasked* image and text are computed once
    and shared by the passes that consume them; each pass then runs its own
    fusion forward. Tasks with weight 0 are skipped entirely, and a task with
    nothing masked contributes neither a loss nor a term in the total.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    mc = model.config
    w = config.task_weights
    B = len(batch)
    n_patches = batch.patches.shape[1]
    m_text = batch.ids.shape[1] - 2
    run = {t: w[t] != 0.0 for t in TASKS}
    losses: dict[str, T.Tensor] = {}
    counts = {t: 0 for t in TASKS}
    no_mask = np.zeros((B, n_patches + 1), dtype=bool)

    hv_full = model.encode_vision(model.embed_image(batch.patches)) if (run["mlm"] or run["itm"]) else None
    hl_full = model.encode_language(model.embed_text(batch.ids)) if (run["mim"] or run["itm"]) else None

    if run["mlm"]:
        plans = [sample_mask_plan(m_text, mc.rho_text, "text", plan_seed(config.seed, step, 1, b)) for b in range(B)]
        masked_ids = np.stack([
            apply_text_mask(TokenSequence(batch.ids[b, 1:-1], batch.ids[b]), plans[b], mc.vocab_size).with_specials
            for b in range(B)
        ])
        if recorder is not None:
            recorder.append(ForwardRecord(step, "mlm", batch.patches, no_mask, masked_ids))
        counts["mlm"] = B * len(plans[0])
        if counts["mlm"]:
            trace = model.fuse(hv_full, model.encode_language(model.embed_text(masked_ids)))
            logits = decode_language(trace.z_l, plans, model.language_decoder)
            losses["mlm"] = mlm_loss(logits, text_targets(batch.ids, plans))

    if run["mim"]:
        plans = [sample_mask_plan(n_patches, mc.rho_image, "image", plan_seed(config.seed, step, 0, b)) for b in range(B)]
        if recorder is not None:
            recorder.append(ForwardRecord(step, "mim", batch.patches, image_mask_array(plans, n_patches + 1), batch.ids))
        counts["mim"] = B * len(plans[0])
        if counts["mim"]:
            xv = apply_image_mask(model.embed_image(batch.patches), plans, model.embeddings)
            trace = model.fuse(model.encode_vision(xv), hl_full)
            pred = decode_vision(select_representation(trace, mc.mim_layer), plans, model.vision_decoder)
            losses["mim"] = mim_loss(pred, image_targets(batch.patches, plans))

    if run["itm"]:
        rng = np.random.default_rng([config.seed, step, 2])
        text_index, labels = sample_itm_pairs(batch.captions, rng)
        if recorder is not None:
            recorder.append(ForwardRecord(step, "itm", batch.patches, no_mask, batch.ids[text_index]))
        trace = model.fuse(hv_full, hl_full[text_index])
        logits = model.itm_head(pool(trace))
        losses["itm"] = itm_loss(logits, labels[:, None])
        counts["itm"] = B

    total = None
    for t, loss in losses.items():
        term = loss * w[t]
        total = term if total is None else total + term
    return StepLosses(losses, counts, total)


def pretrain_step(
    batch: Batch,
    model: M3AE,
    optimizer: AdamW | None,
    step: int,
    config: TrainConfig,
    recorder: list[ForwardRecord] | None = None,
) -> LossReport:
    """Zero grads, run the three objectives, backprop the weighted sum, take one AdamW step.

    With every task weight at zero nothing is run and no optimizer step is
    taken, so parameters stay untouched (weight decay included).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if step >= config.total_steps:
        raise ValueError(f"step {step} beyond total_steps {config.total_steps}")
    if optimizer is not None:
        optimizer.zero_grad()
    out = compute_losses(batch, model, step, config, recorder)
    report = LossReport(
        mim=float(out.losses["mim"].item()) if "mim" in out.losses else 0.0,
        mlm=float(out.losses["mlm"].item()) if "mlm" in out.losses else 0.0,
        itm=float(out.losses["itm"].item()) if "itm" in out.losses else 0.0,
        weights=dict(config.task_weights),
        total=float(out.total.item()) if out.total is not None else 0.0,
        counts=out.counts,
    )
    if optimizer is not None and out.total is not None and out.total.requires_grad:
        T.backward(out.total)
        optimizer.step(optimizer.current_lrs(step))
    return report


# -- training loop ----------------------------------------------------------

LOG_FIELDS = ("step", "lr_unimodal", "lr_fusion", "L_mim", "L_mlm", "L_itm", "total")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def train(
    model: M3AE,
    dataset: PairDataset,
    config: TrainConfig,
    steps: int | None = None,
    optimizer: AdamW | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    vocab: Vocabulary | None = None,
    start_step: int = 0,
    callback: Callable[[int, LossReport], None] | None = None,
) -> list[LossReport]:
    optimizer = optimizer or make_optimizer(model, config)
    end = config.total_steps if steps is None else min(config.total_steps, start_step + steps)
    reports = []
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file, lineterminator="\n") if log_file else None
    if writer:
        writer.writerow(LOG_FIELDS)
    try:
        model.train()
        for step in range(start_step, end):
            batch = dataset.sample_batch(config.batch_size, config.seed, step)
            lrs = optimizer.current_lrs(step)
            rep = pretrain_step(batch, model, optimizer, step, config)
            reports.append(rep)
            if writer:
                writer.writerow([step, _fmt(lrs["unimodal"]), _fmt(lrs["fusion"]),
                                 _fmt(rep.mim), _fmt(rep.mlm), _fmt(rep.itm), _fmt(rep.total)])
            if callback:
                callback(step, rep)
            interval = config.checkpoint_interval
            if checkpoint_path and interval and (step + 1) % interval == 0:
                save_checkpoint(model, optimizer, checkpoint_path, step + 1, vocab=vocab)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(model, optimizer, checkpoint_path, end, vocab=vocab)
    return reports


# -- checkpoints --------------------------------------------------------------

MAGIC = b"M3AECKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    model: M3AE
    step: int
    optimizer_state: AdamWState | None
    optimizer_params: list[str]
    vocab: Vocabulary | None
    extra: dict = field(default_factory=dict)


def _shape_table(model: Module) -> list[tuple[str, list[int]]]:
    return [(n, list(p.shape)) for n, p in model.named_parameters()]


def save_checkpoint(
    model: M3AE,
    optimizer: AdamW | None,
    path: str | Path,
    step: int = 0,
    vocab: Vocabulary | None = None,
    extra: dict | None = None,
) -> None:
    """Write header + JSON manifest + little-endian float32 payload + SHA-256 trailer, atomically.

    The trailer digests every preceding byte, so damage to the header or the
    manifest is caught as surely as damage to the weights.
    """
    path = Path(path)
    params = list(model.named_parameters())
    chunks = [np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in params]
    opt_manifest = None
    if optimizer is not None:
        st = optimizer.state
        names = [n for n, _ in optimizer.parameters()]
        for n in names:
            chunks.append(np.ascontiguousarray(st.first_moment[n], dtype="<f4").tobytes())
        for n in names:
            chunks.append(np.ascontiguousarray(st.second_moment[n], dtype="<f4").tobytes())
        opt_manifest = {
            "step_count": st.step_count, "beta1": st.beta1, "beta2": st.beta2,
            "epsilon": st.epsilon, "weight_decay": st.weight_decay, "params": names,
        }
    payload = b"".join(chunks)
    manifest = {
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "step": int(step),
        "params": _shape_table(model),
        "optimizer": opt_manifest,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "extra": extra or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = _HEADER.pack(MAGIC, VERSION, len(head)) + head + payload
    blob += hashlib.sha256(blob).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest_bytes(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < _HEADER.size + _DIGEST:
        raise CheckpointIntegrityError("checkpoint shorter than its header")
    blob, trailer = blob[:-_DIGEST], blob[-_DIGEST:]
    magic, version, head_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointIntegrityError(f"unsupported checkpoint version {version}")
    if hashlib.sha256(blob).digest() != trailer:
        raise CheckpointIntegrityError("checksum mismatch (file truncated or corrupted)")
    start = _HEADER.size + head_len
    if len(blob) < start:
        raise CheckpointIntegrityError("checkpoint manifest truncated")
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable manifest: {exc}") from None
    payload = blob[start:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointIntegrityError(
            f"payload length {len(payload)} != expected {manifest['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointIntegrityError("payload checksum mismatch")
    return manifest, payload


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> Checkpoint:
    """Rebuild model (and optimizer moments) from ``path``.

    With ``config`` given, the stored shapes are compared against it first and
    the first differing parameter is named; an equal shape table with a
    different config hash is still rejected.
    """
    manifest, payload = read_manifest_bytes(Path(path).read_bytes())
    stored = ModelConfig.from_dict(manifest["config"])
    if config is not None:
        expected = _shape_table(M3AE(config))
        for (name, shape), (cname, cshape) in zip(manifest["params"], expected):
            if name != cname or list(shape) != list(cshape):
                raise CheckpointConfigError(
                    f"first mismatch at {name}: checkpoint shape {tuple(shape)} vs config {cname} {tuple(cshape)}"
                )
        if len(manifest["params"]) != len(expected):
            raise CheckpointConfigError(
                f"checkpoint has {len(manifest['params'])} parameters, config expects {len(expected)}"
            )
        if manifest["config_hash"] != config.digest():
            raise CheckpointConfigError(
                f"config hash mismatch: checkpoint {manifest['config_hash']} vs current {config.digest()}"
            )
    model = M3AE(stored)
    own = dict(model.named_parameters())
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        offset += n
        return arr.astype(np.float32)

    for name, shape in manifest["params"]:
        if name not in own or list(own[name].shape) != list(shape):
            raise CheckpointConfigError(f"stored parameter {name} {tuple(shape)} does not fit the stored config")
        own[name].data = take(shape)
    opt_state, opt_names = None, []
    om = manifest["optimizer"]
    if om is not None:
        opt_names = om["params"]
        shapes = [tuple(own[n].shape) for n in opt_names]
        first = {n: take(s) for n, s in zip(opt_names, shapes)}
        second = {n: take(s) for n, s in zip(opt_names, shapes)}
        opt_state = AdamWState(first, second, om["step_count"], om["beta1"], om["beta2"], om["epsilon"], om["weight_decay"])
    vocab = Vocabulary(tuple(manifest["vocab"])) if manifest["vocab"] else None
    return Checkpoint(model, manifest["step"], opt_state, opt_names, vocab, manifest.get("extra", {}))


def restore_optimizer(optimizer: AdamW, state: AdamWState) -> None:
    own = dict(optimizer.parameters())
    for name in own:
        if name not in state.first_moment:
            raise CheckpointConfigError(f"optimizer state lacks parameter {name}")
    optimizer.state.first_moment = {n: state.first_moment[n].copy() for n in own}
    optimizer.state.second_moment = {n: state.second_moment[n].copy() for n in own}
    optimizer.state.step_count = state.step_count
