"""Toy transcriber victim and the text matching used to score attacks.

The victim maps 16 kHz audio through a log-mel front end and a small
conv/GRU stack to per-frame logits over a 32-symbol vocabulary (blank
plus the transcript alphabet); decoding is greedy with blank collapse.
Also home to normalize_text/substring_match, the success criterion for
every attack in the evaluation harness.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt, synth
from .audio import Waveform

VICTIM_SAMPLE_RATE = 16_000
BLANK = "<blank>"
BLANK_ID = 0
VOCAB = (BLANK,) + tuple(synth.ALPHABET)

_CHAR_TO_ID = {ch: i + 1 for i, ch in enumerate(synth.ALPHABET)}

# Sidecar spellings for symbols that would be invisible as raw lines.
_SIDECAR_NAMES = {BLANK: "<blank>", " ": "<space>"}


# ---------------------------------------------------------------------------
# Text machinery
# ---------------------------------------------------------------------------

# Treated as punctuation: every character in the Unicode general
# categories Pc Pd Pe Pf Pi Po Ps, plus the ASCII symbol characters
# (categories Sc/Sk/Sm) listed here exhaustively:
_ASCII_SYMBOLS = frozenset("$+<=>^`|~")


def normalize_text(s: str) -> str:
    """Lowercase, map punctuation to spaces, collapse whitespace, trim.

    Punctuation becomes a space (not the empty string) so hyphenated or
    punctuation-joined words still match their spaced forms, while
    letter runs with no separator stay joined."""
    s = s.lower()
    chars = [" " if ch in _ASCII_SYMBOLS or unicodedata.category(ch).startswith("P")
             else ch for ch in s]
    return " ".join("".join(chars).split())


def substring_match(output: str, target: str) -> bool:
    """True when the normalized target appears contiguously in the
    normalized output."""
    t = normalize_text(target)
    if not t:
        raise ValueError("target is empty after normalization")
    return t in normalize_text(output)


def tokenize(text: str) -> tuple:
    ids = []
    for ch in text:
        if ch not in _CHAR_TO_ID:
            raise ValueError("symbol %r is outside the victim alphabet" % ch)
        ids.append(_CHAR_TO_ID[ch])
    return tuple(ids)


def detokenize(token_ids) -> str:
    out = []
    for i in token_ids:
        if not 1 <= int(i) < len(VOCAB):
            raise ValueError("token id %r has no text form" % (i,))
        out.append(VOCAB[int(i)])
    return "".join(out)


@dataclass(frozen=True)
class TargetSpec:
    """An attacker-chosen output string plus its token encoding."""

    target_text: str
    token_ids: tuple

    def __post_init__(self):
        if not self.token_ids:
            raise ValueError("empty target")
        if detokenize(self.token_ids) != normalize_text(self.target_text):
            raise ValueError("token_ids do not spell the normalized target text")


def make_target(text: str) -> TargetSpec:
    norm = normalize_text(text)
    if not norm:
        raise ValueError("target is empty after normalization")
    return TargetSpec(target_text=text, token_ids=tokenize(norm))


def build_alignment(token_ids, n_frames: int):
    """Fixed uniform spacing: token i sits at frame floor(i*T/n), every
    other frame is blank. Returns (per-frame ids, slot indices)."""
    n = len(token_ids)
    if n == 0:
        raise ValueError("empty target")
    if n > n_frames:
        raise ValueError(
            "target longer than available output frames (%d tokens > %d frames)"
            % (n, n_frames))
    slots = [(i * n_frames) // n for i in range(n)]
    frames = torch.full((n_frames,), BLANK_ID, dtype=torch.long)
    frames[slots] = torch.as_tensor(token_ids, dtype=torch.long)
    return frames, slots


# ---------------------------------------------------------------------------
# Victim models
# ---------------------------------------------------------------------------

class VictimModel:
    """Anything that scores and transcribes fixed-rate audio.

    Implementations expose differentiable tensor paths (frame_logits,
    hidden_states) over 1-D waveforms at input_sample_rate_hz. Wrapping
    a remote model is possible but such a wrapper cannot honor the
    gradient contract unless the host exposes gradients."""

    input_sample_rate_hz: int = VICTIM_SAMPLE_RATE

    @property
    def vocabulary(self):
        raise NotImplementedError

    def frame_logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def hidden_states(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_filterbank(n_mels: int, n_fft: int, rate: int,
                   fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters with edges uniform on the mel scale."""
    fmax = rate / 2.0 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / rate)
    fb = np.zeros((n_mels, bins.shape[0]))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (bins - lo) / max(mid - lo, 1e-9)
        fall = (hi - bins) / max(hi - mid, 1e-9)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


class ToyTokenVictim(nn.Module, VictimModel):
    """Log-mel front end, two stride-2 convs, bidirectional GRU, linear
    head over the 32-symbol vocabulary. 16 kHz in, ~25 logit frames/s."""

    N_MELS = 40
    N_FFT = 512
    WIN_LENGTH = 400
    HOP_LENGTH = 160
    CONV_CHANNELS = (48, 64)
    GRU_HIDDEN = 48

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = int(seed)
        torch.manual_seed(self.seed)
        fb = mel_filterbank(self.N_MELS, self.N_FFT, VICTIM_SAMPLE_RATE)
        self.register_buffer("mel_fb", torch.as_tensor(fb, dtype=torch.float32))
        self.register_buffer(
            "window", torch.hann_window(self.WIN_LENGTH, periodic=True))
        convs = []
        prev = self.N_MELS
        for c in self.CONV_CHANNELS:
            convs += [nn.Conv1d(prev, c, kernel_size=5, stride=2, padding=2),
                      nn.ELU()]
            prev = c
        self.conv = nn.Sequential(*convs)
        self.gru = nn.GRU(prev, self.GRU_HIDDEN, bidirectional=True)
        self.head = nn.Linear(2 * self.GRU_HIDDEN, len(VOCAB))

    @property
    def vocabulary(self):
        return VOCAB

    @property
    def embed_dim(self) -> int:
        return 2 * self.GRU_HIDDEN

    def config(self) -> dict:
        return {"n_mels": self.N_MELS, "n_fft": self.N_FFT,
                "win_length": self.WIN_LENGTH, "hop_length": self.HOP_LENGTH,
                "conv_channels": list(self.CONV_CHANNELS),
                "gru_hidden": self.GRU_HIDDEN, "vocab_size": len(VOCAB),
                "input_sample_rate_hz": self.input_sample_rate_hz}

    def param_dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def n_frames(self, n_samples: int) -> int:
        t = 1 + n_samples // self.HOP_LENGTH
        for _ in self.CONV_CHANNELS:
            t = (t + 1) // 2
        return t

    # -- differentiable tensor paths ----------------------------------------

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n) waveform batch to (B, n_mels, T) log-mel features."""
        if x.dim() != 2:
            raise ValueError("features expects a (batch, samples) tensor")
        spec = torch.stft(x, self.N_FFT, hop_length=self.HOP_LENGTH,
                          win_length=self.WIN_LENGTH, window=self.window,
                          center=True, pad_mode="reflect", return_complex=True)
        power = spec.abs() ** 2
        return torch.log(torch.matmul(self.mel_fb, power) + 1e-6)

    def hidden_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n) to (B, T', 2H) penultimate hidden states."""
        h = self.conv(self.features(x))
        out, _ = self.gru(h.permute(2, 0, 1))
        return out.permute(1, 0, 2)

    def hidden_states(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 1:
            raise ValueError("hidden_states expects a 1-D waveform tensor")
        return self.hidden_batch(x.unsqueeze(0))[0]

    def frame_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.hidden_states(x))

    def batch_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.hidden_batch(x))


# ---------------------------------------------------------------------------
# Operations on victims
# ---------------------------------------------------------------------------

def _as_input_tensor(victim, w) -> torch.Tensor:
    if isinstance(w, Waveform):
        if w.sample_rate_hz != victim.input_sample_rate_hz:
            raise ValueError("victim expects %d Hz input, got %d Hz"
                             % (victim.input_sample_rate_hz, w.sample_rate_hz))
        dtype = victim.param_dtype() if hasattr(victim, "param_dtype") else torch.float32
        return torch.as_tensor(w.samples, dtype=dtype)
    if isinstance(w, torch.Tensor):
        # caller vouches for the sample rate on the tensor path
        if w.dim() != 1:
            raise ValueError("expected a 1-D waveform tensor")
        return w
    raise TypeError("expected Waveform or torch.Tensor, got %r" % type(w).__name__)


def target_loss(victim, w16k, target: TargetSpec) -> torch.Tensor:
    """Mean cross-entropy at the target's slot frames only; the frames
    between slots are left unconstrained by this loss (the trained
    victim's blank prior keeps them quiet)."""
    x = _as_input_tensor(victim, w16k)
    logits = victim.frame_logits(x)
    _, slots = build_alignment(target.token_ids, logits.shape[0])
    ids = torch.as_tensor(target.token_ids, dtype=torch.long)
    return F.cross_entropy(logits[slots], ids)


def _collapse(ids) -> str:
    out, prev = [], None
    for i in ids:
        if i != prev and i != BLANK_ID:
            out.append(VOCAB[i])
        prev = i
    return "".join(out)


def generate(victim, w16k) -> str:
    """Greedy decode: per-frame argmax, collapse repeats, drop blanks."""
    x = _as_input_tensor(victim, w16k)
    with torch.no_grad():
        logits = victim.frame_logits(x)
    return _collapse(logits.argmax(dim=1).tolist())


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray


def embed(victim, w16k) -> Embedding:
    """Mean-pooled penultimate hidden state."""
    x = _as_input_tensor(victim, w16k)
    with torch.no_grad():
        h = victim.hidden_states(x)
    vec = h.mean(dim=0).detach().cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("non-finite embedding")
    return Embedding(vector=vec)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _alignment_batch(victim, texts, n_frames: int) -> torch.Tensor:
    rows = [build_alignment(tokenize(t), n_frames)[0] for t in texts]
    return torch.stack(rows)


def _token_accuracy(victim, pairs) -> float:
    """Fraction of slot frames whose argmax equals the aligned token."""
    hits = total = 0
    with torch.no_grad():
        for w, text in pairs:
            logits = victim.frame_logits(_as_input_tensor(victim, w))
            _, slots = build_alignment(tokenize(text), logits.shape[0])
            pred = logits.argmax(dim=1)[slots]
            ids = torch.as_tensor(tokenize(text), dtype=torch.long)
            hits += int((pred == ids).sum())
            total += len(slots)
    return hits / max(total, 1)


def train_toy_victim(seed: int = 0, n_pairs: int = 192, duration_s: float = 3.0,
                     steps: int = 600, batch_size: int = 8, lr: float = 2e-3,
                     holdout: int = 12, min_words: int = 1, max_words: int = 4):
    """Supervised training on synthetic (audio, transcript) pairs.

    The training loss is cross-entropy over ALL frames of the uniform
    alignment (tokens at their slots, blank everywhere else); this is
    what gives the trained victim its blank prior. Returns the victim
    plus a history dict with losses and held-out token accuracy."""
    pairs = synth.victim_pairs(n_pairs + holdout, VICTIM_SAMPLE_RATE,
                               duration_s, seed=seed + 1,
                               min_words=min_words, max_words=max_words)
    train_pairs, val_pairs = pairs[:-holdout], pairs[-holdout:]
    victim = ToyTokenVictim(seed=seed)

    acc_before = _token_accuracy(victim, val_pairs)
    data = torch.as_tensor(np.stack([w.samples for w, _ in train_pairs]),
                           dtype=torch.float32)
    n_frames = victim.n_frames(data.shape[1])
    targets = _alignment_batch(victim, [t for _, t in train_pairs], n_frames)
    opt = torch.optim.Adam(victim.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed + 2)
    losses = []
    victim.train()
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        logits = victim.batch_logits(data[idx])
        loss = F.cross_entropy(logits.reshape(-1, len(VOCAB)),
                               targets[idx].reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    victim.eval()
    acc_after = _token_accuracy(victim, val_pairs)
    exact = sum(generate(victim, w) == t for w, t in val_pairs) / len(val_pairs)
    history = {"loss": losses, "val_token_acc_untrained": acc_before,
               "val_token_acc_trained": acc_after, "val_exact_match": exact}
    return victim, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

VICTIM_CHECKPOINT_KIND = "toy-token-victim"


def _vocab_sidecar_path(path) -> str:
    return str(path) + ".vocab.txt"


def save_toy_victim(victim: ToyTokenVictim, path, extra: dict | None = None) -> None:
    ckpt.save_checkpoint(path, VICTIM_CHECKPOINT_KIND, victim.config(), victim.seed,
                         victim.state_dict(), extra=extra)
    lines = [_SIDECAR_NAMES.get(sym, sym) for sym in VOCAB]
    with open(_vocab_sidecar_path(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_toy_victim(path) -> ToyTokenVictim:
    blob = ckpt.load_checkpoint(path, VICTIM_CHECKPOINT_KIND)
    victim = ToyTokenVictim(seed=blob["seed"])
    if victim.config() != blob["config"]:
        raise ValueError("checkpoint config does not match this build: %r"
                         % (blob["config"],))
    victim.load_state_dict(blob["state_dict"])
    victim.eval()
    return victim
