"""
Recommender Model
Compact encoder-decoder transformer. Each input gets its task's continuous
prompt vectors appended after its last real token; a whole-word embedding is
added at every position so the pieces of one entity mention share a vector.

Training objective: mean negative log-likelihood over non-pad target tokens
of each sequence, then the mean over the batch.
"""

import math
import random
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig
from ..exceptions import ModelError, NonFiniteError
from .textcodec import PAD

logger = structlog.get_logger()

INIT_STD = 0.02


def set_determinism(seed: int, threads: int = 1) -> None:
    """Seed every generator in play and pin the intra-op thread count"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


@dataclass
class Batch:
    """Right-padded model inputs; targets end with EOS"""

    input_ids: torch.Tensor  # (B, L)
    whole_word: torch.Tensor  # (B, L)
    lengths: torch.Tensor  # (B,)
    task_ids: torch.Tensor  # (B,)
    target_ids: torch.Tensor  # (B, T)
    target_lengths: torch.Tensor  # (B,)

    def __len__(self) -> int:
        return int(self.input_ids.size(0))

    @classmethod
    def build(cls, inputs: Sequence, task_ids: Sequence[int], targets: Sequence[Sequence[int]]) -> "Batch":
        """
        Args:
            inputs: TokenSequence-like objects (ids, whole_word)
            task_ids: prompt block index per sample
            targets: non-empty target id lists
        """
        if not inputs:
            raise ModelError("empty batch", code="EMPTY_BATCH")
        if any(len(t) == 0 for t in targets):
            raise ModelError("target sequences must be non-empty", code="EMPTY_TARGET")
        max_in = max(max(len(s.ids) for s in inputs), 1)
        max_out = max(len(t) for t in targets)
        input_ids = torch.full((len(inputs), max_in), PAD, dtype=torch.long)
        whole_word = torch.zeros((len(inputs), max_in), dtype=torch.long)
        target_ids = torch.full((len(inputs), max_out), PAD, dtype=torch.long)
        for row, (seq, target) in enumerate(zip(inputs, targets)):
            if seq.ids:
                input_ids[row, : len(seq.ids)] = torch.tensor(seq.ids, dtype=torch.long)
                whole_word[row, : len(seq.ids)] = torch.tensor(seq.whole_word, dtype=torch.long)
            target_ids[row, : len(target)] = torch.tensor(list(target), dtype=torch.long)
        return cls(
            input_ids=input_ids,
            whole_word=whole_word,
            lengths=torch.tensor([len(s.ids) for s in inputs], dtype=torch.long),
            task_ids=torch.tensor(list(task_ids), dtype=torch.long),
            target_ids=target_ids,
            target_lengths=torch.tensor([len(t) for t in targets], dtype=torch.long),
        )

    @classmethod
    def from_samples(cls, samples: Sequence) -> "Batch":
        return cls.build([s.input for s in samples], [s.task.index for s in samples], [s.target for s in samples])


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, T, V)
    loss: torch.Tensor  # scalar
    sequence_loss: torch.Tensor  # (B,)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: torch.Tensor, memory: torch.Tensor, key_valid: torch.Tensor,
                causal: bool = False) -> torch.Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)

        mask = key_valid[:, None, None, :]
        if causal:
            n_q, n_k = query.size(1), memory.size(1)
            mask = mask & torch.ones(n_q, n_k, dtype=torch.bool, device=query.device).tril()
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()

        out = self.dropout(weights) @ v
        b, _, n, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, self.n_heads * self.d_head))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc_in = nn.Linear(d_model, d_ff)
        self.fc_out = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(self.dropout(F.gelu(self.fc_in(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        h = self.self_norm(x)
        x = x + self.dropout(self.self_attn(h, h, valid))
        return x + self.dropout(self.ff(self.ff_norm(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y: torch.Tensor, y_valid: torch.Tensor, memory: torch.Tensor,
                memory_valid: torch.Tensor) -> torch.Tensor:
        h = self.self_norm(y)
        y = y + self.dropout(self.self_attn(h, h, y_valid, causal=True))
        y = y + self.dropout(self.cross_attn(self.cross_norm(y), memory, memory_valid))
        return y + self.dropout(self.ff(self.ff_norm(y)))


class RDRecModel(nn.Module):
    """
    Encoder-decoder with a per-task prompt bank and whole-word embeddings

    Prompt vectors are encoder-side only; the decoder starts from PAD.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.whole_word_embedding = nn.Embedding(cfg.whole_word_capacity + 1, cfg.d_model)
        self.prompt_bank = nn.Parameter(torch.empty(cfg.n_tasks, cfg.n_prompt_per_task, cfg.d_model))
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.decoder_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.dropout = nn.Dropout(cfg.dropout)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_seq_len, cfg.d_model), persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.prompt_bank, mean=0.0, std=INIT_STD)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check(self, x: torch.Tensor, layer: str, enabled: bool) -> None:
        if enabled and not torch.isfinite(x).all():
            raise NonFiniteError(layer)

    def embed_input(self, input_ids: torch.Tensor, whole_word: torch.Tensor, lengths: torch.Tensor,
                    task_ids: torch.Tensor):
        """
        Token embeddings of the real tokens followed by the task's prompt vectors

        Returns:
            (representation (B, L+P, d), valid-position mask (B, L+P))
        """
        n_prompt = self.cfg.n_prompt_per_task
        batch, width = input_ids.shape
        total = width + n_prompt
        if total > self.cfg.max_seq_len:
            raise ModelError(f"input of {width} tokens plus {n_prompt} prompts exceeds max_seq_len "
                             f"{self.cfg.max_seq_len}", code="SEQ_OVERFLOW")
        if whole_word.numel() and int(whole_word.max()) > self.cfg.whole_word_capacity:
            raise ModelError(f"whole-word index {int(whole_word.max())} exceeds capacity "
                             f"{self.cfg.whole_word_capacity}", code="WHOLE_WORD_OVERFLOW")
        if int(task_ids.max()) >= self.cfg.n_tasks:
            raise ModelError(f"task index {int(task_ids.max())} outside prompt bank", code="BAD_TASK")

        d = self.cfg.d_model
        tokens = self.token_embedding(input_ids)
        x = torch.cat([tokens, tokens.new_zeros(batch, n_prompt, d)], dim=1)

        positions = torch.arange(total, device=input_ids.device).unsqueeze(0)
        rel = positions - lengths.unsqueeze(1)
        is_prompt = (rel >= 0) & (rel < n_prompt)
        prompts = self.prompt_bank[task_ids]
        gathered = prompts.gather(1, rel.clamp(0, n_prompt - 1).unsqueeze(-1).expand(-1, -1, d))
        x = torch.where(is_prompt.unsqueeze(-1), gathered, x)

        ww = torch.cat([whole_word, whole_word.new_zeros(batch, n_prompt)], dim=1)
        valid = positions < (lengths + n_prompt).unsqueeze(1)
        ww = ww.masked_fill(is_prompt | ~valid, 0)
        x = x + self.whole_word_embedding(ww) + self.positions[:total].to(x.dtype)
        return x, valid

    def encode(self, batch: Batch, check_finite: bool = False):
        x, valid = self.embed_input(batch.input_ids, batch.whole_word, batch.lengths, batch.task_ids)
        x = self.dropout(x)
        self._check(x, "embedding", check_finite)
        for n, layer in enumerate(self.encoder_layers):
            x = layer(x, valid)
            self._check(x, f"encoder.{n}", check_finite)
        x = self.encoder_norm(x)
        return x, valid

    def decode(self, memory: torch.Tensor, memory_valid: torch.Tensor, decoder_input: torch.Tensor,
               decoder_valid: Optional[torch.Tensor] = None, check_finite: bool = False) -> torch.Tensor:
        """Logits for every decoder position (B, T, V)"""
        steps = decoder_input.size(1)
        if steps > self.cfg.max_seq_len:
            raise ModelError(f"decoder length {steps} exceeds max_seq_len", code="SEQ_OVERFLOW")
        if decoder_valid is None:
            decoder_valid = torch.ones_like(decoder_input, dtype=torch.bool)
        y = self.token_embedding(decoder_input) + self.positions[:steps].to(memory.dtype)
        y = self.dropout(y)
        for n, layer in enumerate(self.decoder_layers):
            y = layer(y, decoder_valid, memory, memory_valid)
            self._check(y, f"decoder.{n}", check_finite)
        logits = self.lm_head(self.decoder_norm(y))
        self._check(logits, "lm_head", check_finite)
        return logits

    def forward(self, batch: Batch, check_finite: bool = False) -> ForwardOutput:
        memory, memory_valid = self.encode(batch, check_finite)
        targets = batch.target_ids
        decoder_input = torch.cat([torch.full_like(targets[:, :1], PAD), targets[:, :-1]], dim=1)
        target_valid = torch.arange(targets.size(1)).unsqueeze(0) < batch.target_lengths.unsqueeze(1)
        logits = self.decode(memory, memory_valid, decoder_input, target_valid, check_finite)

        log_probs = torch.log_softmax(logits, dim=-1)
        nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        nll = nll.masked_fill(~target_valid, 0.0)
        sequence_loss = nll.sum(dim=1) / batch.target_lengths.to(nll.dtype)
        loss = sequence_loss.mean()
        if check_finite and not torch.isfinite(loss):
            raise NonFiniteError("loss")
        return ForwardOutput(logits=logits, loss=loss, sequence_loss=sequence_loss)


def backward(fo: ForwardOutput, model: nn.Module) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of fo.loss for every trainable tensor, by name

    Parameters the loss does not touch get zero gradients.
    """
    if fo.loss.grad_fn is None:
        raise ModelError("backward needs a forward pass recorded with gradients enabled", code="NO_GRAPH")
    model.zero_grad(set_to_none=True)
    fo.loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
        if p.requires_grad
    }


class AdamWOptimizer:
    """
    AdamW over a module's named parameters

    Weight decay is decoupled: parameters shrink by (1 - lr * wd) each step
    independently of the gradient.
    """

    def __init__(self, model: nn.Module, lr: float, weight_decay: float = 0.0,
                 grad_clip: Optional[float] = None, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ModelError(f"learning rate must be positive, got {lr}", code="BAD_LR")
        self.model = model
        self.grad_clip = grad_clip
        self.step_count = 0
        self._named = dict(model.named_parameters())
        self.optimizer = torch.optim.AdamW(
            [p for p in self._named.values() if p.requires_grad],
            lr=lr, betas=betas, eps=eps, weight_decay=weight_decay,
        )

    def step(self, grads: Optional[Dict[str, torch.Tensor]] = None) -> int:
        """Apply one update from grads (or the gradients already on the parameters)"""
        for name, p in self._named.items():
            if not p.requires_grad:
                continue
            if grads is not None:
                if name not in grads:
                    raise ModelError(f"missing gradient for {name}", code="SHAPE_MISMATCH")
                if grads[name].shape != p.shape:
                    raise ModelError(f"gradient shape {tuple(grads[name].shape)} != {tuple(p.shape)} for {name}",
                                     code="SHAPE_MISMATCH")
                p.grad = grads[name].to(p.dtype).clone()
            elif p.grad is None:
                p.grad = torch.zeros_like(p)
            if torch.isnan(p.grad).any():
                raise ModelError(f"NaN gradient for {name}", code="NAN_GRADIENT")
        if self.grad_clip:
            nn.utils.clip_grad_norm_(self._named.values(), self.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return self.step_count

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()


def optimizer_step(optimizer: AdamWOptimizer, grads: Dict[str, torch.Tensor]) -> int:
    return optimizer.step(grads)


@torch.no_grad()
def score_sequences(model: RDRecModel, batch: Batch) -> torch.Tensor:
    """Forced decoding: summed target log-probability per sequence (B,)"""
    was_training = model.training
    model.eval()
    try:
        memory, memory_valid = model.encode(batch)
        targets = batch.target_ids
        decoder_input = torch.cat([torch.full_like(targets[:, :1], PAD), targets[:, :-1]], dim=1)
        valid = torch.arange(targets.size(1)).unsqueeze(0) < batch.target_lengths.unsqueeze(1)
        logits = model.decode(memory, memory_valid, decoder_input, valid)
        log_probs = torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return log_probs.masked_fill(~valid, 0.0).sum(dim=1)
    finally:
        model.train(was_training)


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> RDRecModel:
    if seed is not None:
        torch.manual_seed(seed)
    model = RDRecModel(cfg)
    logger.info("Model built", parameters=model.n_parameters, layers=cfg.n_layers, d_model=cfg.d_model,
                vocab_size=cfg.vocab_size)
    return model
