"""Training: next-token pretraining, the preference + continual-training
objective with a frozen reference model and prompt masking, and AdamW.

The combined loss is  L = L_pref + lambda * L_ct  where L_pref is the DPO
term over (winner, loser) answer spans (prompt tokens contribute only as
conditioning) and L_ct is the NLL over the full winner sequences, anchoring
the policy to the chosen responses.
"""

from __future__ import annotations

import copy
import logging
import random
import time
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .corpus import BOS_ID, EOS_ID, PAD_ID, RenderedExample, Vocabulary
from .model import TransformerLM
from .negsample import PreferencePair

log = logging.getLogger(__name__)

TRAIN_CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    beta: float = 0.1  # preference-loss strength
    lam: float = 1.0  # continual-training weight
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.beta <= 0 or self.lam < 0 or self.learning_rate <= 0:
            raise ValueError("require beta > 0, lam >= 0, learning_rate > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["spec_version"] = TRAIN_CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "spec_version"}
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


class AdamW(torch.optim.Optimizer):
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            lr, (b1, b2), eps, wd = group["lr"], group["betas"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    if wd != 0.0:
                        p.mul_(1.0 - lr * wd)
                    continue
                g = p.grad
                if not torch.isfinite(g).all():
                    raise ValueError("non-finite gradient")
                state = self.state[p]
                if not state:
                    state["t"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["t"] += 1
                t = state["t"]
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
                if wd != 0.0:
                    p.mul_(1.0 - lr * wd)
        return loss


def _pad_batch(seqs: list[list[int]], dtype=torch.long) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=dtype)
    return out


def _token_logprobs(model: TransformerLM, tokens: torch.Tensor) -> torch.Tensor:
    """(B, T-1) log-probabilities of tokens[:, 1:] given their prefixes."""
    logits = model(tokens)
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    return logp.gather(-1, tokens[:, 1:].unsqueeze(-1)).squeeze(-1)


def ntp_loss(model: TransformerLM, sequences: list[list[int]]) -> torch.Tensor:
    """Mean NLL over all non-pad target positions (BOS is never a target)."""
    if not sequences:
        raise ValueError("empty batch")
    tokens = _pad_batch(sequences)
    per_tok = _token_logprobs(model, tokens)
    mask = tokens[:, 1:] != PAD_ID
    return -(per_tok * mask).sum() / mask.sum()


def ct_loss(model: TransformerLM, winner_sequences: list[list[int]]) -> torch.Tensor:
    """NLL over the full chosen sequences; definitionally ntp_loss on them."""
    return ntp_loss(model, winner_sequences)


@dataclass
class TokenizedPair:
    triple_id: str
    prompt: list[int]  # BOS + question tokens
    winner: list[int]  # answer tokens + EOS
    loser: list[int]  # answer tokens + EOS


def tokenize_pair(pair: PreferencePair, vocab: Vocabulary) -> TokenizedPair:
    winner = vocab.encode(pair.winner) + [EOS_ID]
    loser = vocab.encode(pair.loser) + [EOS_ID]
    if winner == loser:
        raise ValueError(f"pair for {pair.triple_id}: loser identical to winner after tokenization")
    return TokenizedPair(
        triple_id=pair.triple_id,
        prompt=[BOS_ID] + vocab.encode(pair.prompt),
        winner=winner,
        loser=loser,
    )


def _answer_logprobs(
    model: TransformerLM, pairs: list[TokenizedPair], side: str
) -> torch.Tensor:
    """(B,) summed log-probability of each pair's answer span (incl. EOS),
    conditioned on the prompt; prompt positions are masked out as targets."""
    seqs = [p.prompt + getattr(p, side) for p in pairs]
    tokens = _pad_batch(seqs)
    per_tok = _token_logprobs(model, tokens)
    mask = torch.zeros_like(per_tok)
    for i, p in enumerate(pairs):
        start = len(p.prompt) - 1  # row index predicting the first answer token
        mask[i, start : start + len(getattr(p, side))] = 1.0
    return (per_tok * mask).sum(dim=1)


def dpo_loss(
    policy: TransformerLM,
    reference: TransformerLM,
    pairs: list[TokenizedPair],
    beta: float,
) -> torch.Tensor:
    """-log sigmoid(beta * margin) averaged over pairs; the margin is the
    policy-vs-reference log-probability gap of winner minus loser."""
    if not pairs:
        raise ValueError("empty batch")
    pol_w = _answer_logprobs(policy, pairs, "winner")
    pol_l = _answer_logprobs(policy, pairs, "loser")
    with torch.no_grad():
        ref_w = _answer_logprobs(reference, pairs, "winner")
        ref_l = _answer_logprobs(reference, pairs, "loser")
    margin = (pol_w - ref_w) - (pol_l - ref_l)
    return -F.logsigmoid(beta * margin).mean()


def combined_loss(
    policy: TransformerLM,
    reference: TransformerLM,
    pairs: list[TokenizedPair],
    beta: float,
    lam: float,
) -> tuple[torch.Tensor, float, float]:
    """Preference term plus lam * NLL over the winner sequences of the batch.
    Returns (loss, preference component, ct component)."""
    pref = dpo_loss(policy, reference, pairs, beta)
    if lam == 0.0:
        return pref, pref.item(), 0.0
    anchor = ct_loss(policy, [p.prompt + p.winner for p in pairs])
    return pref + lam * anchor, pref.item(), anchor.item()


class StepLogger:
    """Line-oriented step log: step, loss, preference and ct components, wall-clock."""

    def __init__(self, path=None):
        self._f = open(path, "w") if path else None
        self._t0 = time.monotonic()

    def log(self, step: int, loss: float, pref: float = 0.0, ct: float = 0.0):
        if self._f:
            self._f.write(f"{step}\t{loss:.6f}\t{pref:.6f}\t{ct:.6f}\t{time.monotonic() - self._t0:.3f}\n")

    def close(self):
        if self._f:
            self._f.close()


def run_pretrain(
    stream: list[RenderedExample],
    model: TransformerLM,
    config: TrainConfig,
    log_path=None,
) -> TransformerLM:
    """Next-token pretraining over the rendered corpus stream, in place."""
    opt = AdamW(model.parameters(), lr=config.learning_rate,
                betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    logger = StepLogger(log_path)
    step = 0
    order = list(range(len(stream)))
    for epoch in range(config.epochs):
        random.Random(config.seed + epoch).shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [stream[i].full_tokens for i in order[start : start + config.batch_size]]
            loss = ntp_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            logger.log(step, loss.item())
    logger.close()
    return model


def run_preference_training(
    pairs: list[TokenizedPair],
    base: TransformerLM,
    config: TrainConfig,
    use_dpo: bool = True,
    log_path=None,
) -> TransformerLM:
    """Continual-training phase from a base checkpoint: the reference is a
    frozen copy of base, the policy starts equal to it. Ablations: lam=0
    drops the anchor term; use_dpo=False is plain continual training."""
    policy = copy.deepcopy(base)
    reference = copy.deepcopy(base)
    reference.eval()
    for p in reference.parameters():
        p.requires_grad_(False)
    opt = AdamW(policy.parameters(), lr=config.learning_rate,
                betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    logger = StepLogger(log_path)
    step = 0
    order = list(range(len(pairs)))
    for epoch in range(config.epochs):
        random.Random(config.seed + epoch).shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            if use_dpo:
                loss, pref, anchor = combined_loss(policy, reference, batch, config.beta, config.lam)
            else:
                loss = ct_loss(policy, [p.prompt + p.winner for p in batch])
                pref, anchor = 0.0, loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            logger.log(step, loss.item(), pref, anchor)
    logger.close()
    return policy
