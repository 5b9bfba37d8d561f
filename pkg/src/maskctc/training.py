"""Joint CTC + masked-token + mask-length training."""
import logging
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .ctc import ctc_loss_batch
from .masking import combined_loss, dlp_loss, make_deletion_sample, make_insertion_sample, mlm_loss, sample_mlm_mask
from .model import (
    DecoderConfig,
    EncoderConfig,
    MaskCTCModel,
    ModelCheckpoint,
    ModelConfig,
    Vocabulary,
    average_checkpoints,
    checkpoint_from_model,
    load_checkpoint,
    load_parameters,
    save_checkpoint,
)
from .numerics import DTYPE, Rng, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # model
    architecture: str = "conformer"
    enc_layers: int = 2
    dec_layers: int = 2
    attn_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 7
    downsample: int = 2
    dropout: float = 0.0
    # objective
    alpha: float = 0.3
    beta: float = 1.0
    # optimisation
    epochs: int = 30
    batch_size: int = 16
    lr: float = 4e-3
    warmup_steps: int = 200
    grad_clip: float = 5.0
    average_last: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ("transformer", "conformer"):
            raise ValueError(f"unknown encoder architecture {self.architecture!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        for k in ("enc_layers", "dec_layers", "attn_dim", "num_heads", "ffn_dim", "downsample", "batch_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.epochs < 0 or self.warmup_steps < 0 or self.average_last < 0:
            raise ValueError("epochs, warmup_steps and average_last must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    def model_config(self, input_dim, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            vocab=vocab,
            encoder=EncoderConfig(
                architecture=self.architecture,
                num_layers=self.enc_layers,
                attn_dim=self.attn_dim,
                num_heads=self.num_heads,
                ffn_dim=self.ffn_dim,
                conv_kernel=self.conv_kernel,
                downsample_factor=self.downsample,
                dropout=self.dropout,
            ),
            decoder=DecoderConfig(
                num_layers=self.dec_layers,
                num_heads=self.num_heads,
                ffn_dim=self.ffn_dim,
                dropout=self.dropout,
            ),
        )


def learning_rate(cfg: TrainConfig, step):
    """Linear warmup to ``cfg.lr``, then inverse square-root decay."""
    step = max(step, 1)
    w = max(cfg.warmup_steps, 1)
    return cfg.lr * min(step / w, math.sqrt(w / step))


def pad_features(feats):
    lengths = [f.shape[0] for f in feats]
    T, D = max(lengths), feats[0].shape[1]
    out = np.zeros((len(feats), T, D))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return torch.as_tensor(out, dtype=DTYPE), lengths


def pad_tokens(seqs, pad_id):
    L = max(len(s) for s in seqs)
    out = torch.full((len(seqs), L), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def batch_losses(model, feats, refs, rng, alpha, beta):
    """Summed (total, ctc, mlm, dlp) losses over one batch.

    Every utterance contributes one masked-token sample and, when ``beta > 0``,
    one deletion-style and one insertion-style length sample; all decoder
    inputs share a single encoder pass.
    """
    vocab = model.vocab
    x, lengths = pad_features(feats)
    enc, enc_len = model.encode_batch(x, lengths)
    ctc_nll = ctc_loss_batch(model.ctc_head(enc), enc_len, refs).sum()

    B = len(refs)
    mlm_samples = [sample_mlm_mask(y, rng, vocab.mask_id) for y in refs]
    dec_inputs = [s.tokens for s in mlm_samples]
    dlp_samples = []
    if beta > 0:
        dlp_samples = [make_deletion_sample(y, rng, vocab.mask_id) for y in refs]
        dlp_samples += [make_insertion_sample(y, rng, vocab.mask_id) for y in refs]
        dec_inputs += [s.masked.tokens for s in dlp_samples]
    reps = len(dec_inputs) // B
    rows = torch.arange(B).repeat(reps)
    states = model.decoder_states_batch(enc[rows], [enc_len[i] for i in rows.tolist()], pad_tokens(dec_inputs, vocab.pad_id))

    mlm_lp = model.mlm_head(states[:B])
    mlm_nll = sum(mlm_loss(mlm_lp[i, : len(s)], s, refs[i]) for i, s in enumerate(mlm_samples))
    if dlp_samples:
        len_lp = model.length_head(states[B:])
        dlp_nll = sum(dlp_loss(len_lp[i, : len(s.masked)], s) for i, s in enumerate(dlp_samples))
    else:
        dlp_nll = torch.zeros((), dtype=DTYPE)
    total = combined_loss(ctc_nll, mlm_nll, dlp_nll, alpha, beta)
    return total, ctc_nll, mlm_nll, dlp_nll


def _optimizer_state(model, opt):
    extra = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        extra[f"adam.{name}.exp_avg"] = st["exp_avg"].detach().numpy().copy()
        extra[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
        extra[f"adam.{name}.step"] = np.array(float(st["step"]))
    return extra


def _restore_optimizer(model, opt, extra):
    for name, p in model.named_parameters():
        key = f"adam.{name}.exp_avg"
        if key not in extra:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(np.ravel(extra[f"adam.{name}.step"])[0]), dtype=torch.float32),
            "exp_avg": torch.as_tensor(extra[key], dtype=DTYPE).clone(),
            "exp_avg_sq": torch.as_tensor(extra[f"adam.{name}.exp_avg_sq"], dtype=DTYPE).clone(),
        }


class TrainingError(RuntimeError):
    pass


class Trainer:
    """Epoch loop with seeded shuffling and masking, per-epoch checkpoints and final averaging.

    Randomness for epoch ``k`` comes from a stream derived from ``(seed, k)``,
    so resuming from an epoch checkpoint replays the remaining epochs exactly.
    """

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, input_dim, out_dir=None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.model = MaskCTCModel(cfg.model_config(input_dim, vocab), seed=cfg.seed)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=(0.9, 0.98), eps=1e-9)
        self.epoch = 0
        self.step = 0
        self.history = []
        self.checkpoints = []

    @classmethod
    def resume(cls, path, cfg: TrainConfig = None, out_dir=None):
        ckpt = load_checkpoint(path)
        cfg = cfg or TrainConfig(**ckpt.meta["train_config"])
        trainer = cls(cfg, ckpt.config.vocab, ckpt.config.input_dim, out_dir)
        load_parameters(trainer.model, ckpt.parameters)
        _restore_optimizer(trainer.model, trainer.opt, ckpt.extra)
        trainer.epoch = int(ckpt.meta["epoch"])
        trainer.step = int(ckpt.meta["step"])
        trainer.history = list(ckpt.meta.get("history", []))
        trainer.checkpoints = [ckpt]
        return trainer

    def _checkpoint(self):
        meta = {"epoch": self.epoch, "step": self.step, "train_config": asdict(self.cfg), "history": self.history}
        return checkpoint_from_model(self.model, meta=meta, extra=_optimizer_state(self.model, self.opt))

    def run_epoch(self, utts):
        cfg = self.cfg
        rng = Rng(cfg.seed).spawn(1, self.epoch)
        self.model.train()
        self.model.set_dropout_generator(rng.torch_generator())
        order = rng.permutation(len(utts))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            batch = [utts[i] for i in order[start : start + cfg.batch_size]]
            self.step += 1
            for g in self.opt.param_groups:
                g["lr"] = learning_rate(cfg, self.step)
            losses = batch_losses(self.model, [u.features for u in batch], [u.reference for u in batch], rng, cfg.alpha, cfg.beta)
            loss = losses[0] / len(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {self.step}")
            self.opt.zero_grad()
            backward(loss)
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            self.opt.step()
            sums += [float(v.detach()) for v in losses]
        self.epoch += 1
        n = max(len(utts), 1)
        record = {"epoch": self.epoch, **{k: float(v) / n for k, v in zip(("loss", "ctc", "mlm", "dlp"), sums)}}
        self.history.append(record)
        log.info("epoch %d loss %.4f ctc %.4f mlm %.4f dlp %.4f", self.epoch, *[record[k] for k in ("loss", "ctc", "mlm", "dlp")])
        return record

    def fit(self, utts, epochs=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        while self.epoch < epochs:
            self.run_epoch(utts)
            ckpt = self._checkpoint()
            self.checkpoints.append(ckpt)
            if self.out_dir:
                os.makedirs(self.out_dir, exist_ok=True)
                save_checkpoint(os.path.join(self.out_dir, f"epoch{self.epoch:03d}.ckpt"), ckpt)
        return self

    def averaged(self, last=None) -> ModelCheckpoint:
        """Average of the last ``last`` epoch checkpoints held in memory or on disk."""
        last = self.cfg.average_last if last is None else last
        held = {int(c.meta["epoch"]): c for c in self.checkpoints}
        chosen = []
        for e in range(max(1, self.epoch - max(last, 1) + 1), self.epoch + 1):
            path = os.path.join(self.out_dir, f"epoch{e:03d}.ckpt") if self.out_dir else None
            if e in held:
                chosen.append(held[e])
            elif path and os.path.exists(path):
                chosen.append(load_checkpoint(path))
        if not chosen:
            chosen = [self._checkpoint()]
        avg = average_checkpoints(chosen)
        avg.meta.update({"epoch": self.epoch, "train_config": asdict(self.cfg)})
        return avg
