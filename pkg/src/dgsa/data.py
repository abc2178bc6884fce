"""Datasets: synthetic noise-robustness tasks, IDX images and tab-separated text.

Synthetic token task
    Token ids: 0 = PAD, 1 = UNK, then ``n_distractors`` distractor tokens,
    then one sub-vocabulary of ``subvocab_size`` tokens per class.  Each
    sample of length ``seq_len`` carries ``signal_tokens`` tokens drawn from
    its class sub-vocabulary at random positions; every other position holds
    a random distractor.  Spurious-token noise then overwrites each position
    with a random distractor with probability ``rate``.  Counting sub-vocab
    hits recovers the label exactly at rate 0.

Synthetic patch task
    ``n_classes`` fixed geometric templates on a ``channels x S x S`` canvas,
    background 0.2 and foreground 0.8, plus clamped Gaussian pixel noise.
    See :func:`template_stats` for energies and the SNR definition.
"""

from __future__ import annotations

import os
import re
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .models import Batch

PAD, UNK = 0, 1
KINDS = ("synth_text", "synth_vision", "idx_images", "csv_text")
NOISES = ("none", "gaussian", "spurious_tokens")
BACKGROUND, FOREGROUND = 0.2, 0.8
N_TEMPLATES = 10


@dataclass
class DatasetSpec:
    data_kind: str = "synth_text"
    data_size: int = 2000
    test_size: int = 1000
    n_classes: int = 2
    noise: str = "none"
    noise_sigma: float = 0.0
    noise_rate: float = 0.0
    data_seed: int = 0
    # synthetic text
    seq_len: int = 16
    signal_tokens: int = 3
    subvocab_size: int = 4
    vocab_size: int = 64
    # synthetic / idx vision
    image_size: int = 8
    channels: int = 1
    # real text
    min_token_freq: int = 2
    max_vocab: int = 60000
    max_seq_len: int = 32
    # files (idx_images / csv_text); empty test paths mean an 80/20 split
    data_path: str = ""
    labels_path: str = ""
    test_path: str = ""
    test_labels_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data_kind not in KINDS:
            raise ConfigError(f"data_kind must be one of {KINDS}, got {self.data_kind!r}")
        if self.noise not in NOISES:
            raise ConfigError(f"noise must be one of {NOISES}, got {self.noise!r}")
        if self.data_size <= 0 or self.test_size < 0:
            raise ConfigError("data_size must be > 0 and test_size >= 0")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")

    @property
    def n_distractors(self) -> int:
        return self.vocab_size - 2 - self.n_classes * self.subvocab_size

    @property
    def sigma(self) -> float:
        return self.noise_sigma if self.noise == "gaussian" else 0.0

    @property
    def rate(self) -> float:
        return self.noise_rate if self.noise == "spurious_tokens" else 0.0


@dataclass
class Dataset:
    """Inputs plus labels; ``mask`` marks real (non-padding) tokens for text."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    kind: str
    mask: np.ndarray | None = None
    noise: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(inputs=self.inputs[idx], labels=self.labels[idx],
                     mask=None if self.mask is None else self.mask[idx],
                     noise=None if self.noise is None else self.noise[idx])

    def subset(self, idx) -> "Dataset":
        b = self.batch(idx)
        return Dataset(b.inputs, b.labels, self.n_classes, self.kind, b.mask, b.noise)


def _balanced_labels(size: int, n_classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(size) % n_classes)


# -- synthetic text ----------------------------------------------------------

def synth_token_task(spec: DatasetSpec, rng: np.random.Generator, size: int | None = None) -> Dataset:
    """Signal tokens hidden among distractors; see module docstring.

    ``noise`` holds, per sample, the number of positions that were overwritten.
    """
    size = spec.data_size if size is None else size
    if spec.signal_tokens < 1 or spec.signal_tokens > spec.seq_len:
        raise ConfigError("signal_tokens must lie in [1, seq_len]")
    if spec.subvocab_size < 1 or spec.n_distractors < 1:
        raise ConfigError(f"vocab_size={spec.vocab_size} cannot hold {spec.n_classes} class "
                          f"sub-vocabularies of {spec.subvocab_size} tokens plus distractors")
    C, N, k, S, D = spec.n_classes, spec.seq_len, spec.signal_tokens, spec.subvocab_size, spec.n_distractors
    labels = _balanced_labels(size, C, rng)
    tokens = rng.integers(2, 2 + D, size=(size, N))
    # k distinct positions per row: argsort of uniform keys
    positions = np.argsort(rng.random((size, N)), axis=1)[:, :k]
    signal = 2 + D + labels[:, None] * S + rng.integers(0, S, size=(size, k))
    np.put_along_axis(tokens, positions, signal, axis=1)
    hit = rng.random((size, N)) < spec.rate
    tokens = np.where(hit, rng.integers(2, 2 + D, size=(size, N)), tokens)
    return Dataset(tokens.astype(np.int64), labels.astype(np.int64), C, "text",
                   mask=np.ones((size, N), dtype=bool), noise=hit.sum(axis=1).astype(float))


def counting_oracle(tokens: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Predict the class whose sub-vocabulary appears most often; ties -> lowest index."""
    base = 2 + spec.n_distractors
    cls = (tokens - base) // spec.subvocab_size
    valid = (tokens >= base) & (cls < spec.n_classes)
    counts = np.stack([((cls == c) & valid).sum(axis=1) for c in range(spec.n_classes)], axis=1)
    return counts.argmax(axis=1)


def token_oracle_accuracy(ds: Dataset, spec: DatasetSpec) -> float:
    return float((counting_oracle(ds.inputs, spec) == ds.labels).mean())


# -- synthetic vision --------------------------------------------------------

def make_templates(n_classes: int, size: int, channels: int = 1) -> np.ndarray:
    """(n_classes, channels, size, size) binary-valued patterns in {0.2, 0.8}."""
    if n_classes > N_TEMPLATES:
        raise ConfigError(f"at most {N_TEMPLATES} template classes are defined, got {n_classes}")
    if size < 4:
        raise ConfigError("synthetic images need size >= 4")
    i, j = np.mgrid[0:size, 0:size]
    w = max(1, size // 4)
    lo, hi = (size - w) // 2, (size - w) // 2 + w
    hbar = (i >= lo) & (i < hi)
    vbar = (j >= lo) & (j < hi)
    q = size // 4
    masks = [
        hbar,
        vbar,
        np.abs(i - j) < max(1, size // 8 + 1),
        np.abs(i + j - (size - 1)) < max(1, size // 8 + 1),
        (i < w) | (i >= size - w) | (j < w) | (j >= size - w),
        (i >= q) & (i < size - q) & (j >= q) & (j < size - q),
        (i < size // 2) == (j < size // 2),
        hbar | vbar,
        i < size // 2,
        j < size // 2,
    ]
    out = np.empty((n_classes, channels, size, size))
    for c in range(n_classes):
        out[c] = np.where(masks[c], FOREGROUND, BACKGROUND)[None]
    return out


def template_stats(n_classes: int, size: int, channels: int = 1) -> dict:
    """Template energies and separations.

    ``energy[c]`` is the squared distance of template c from the mid-gray
    level 0.5 summed over pixels; ``min_sq_distance`` is the smallest
    squared distance between two templates.  The task SNR at noise level
    sigma is ``min_sq_distance / (4 * sigma^2)`` (half the separation over
    the per-direction noise std, squared).
    """
    T = make_templates(n_classes, size, channels).reshape(n_classes, -1)
    d2 = ((T[:, None, :] - T[None, :, :]) ** 2).sum(-1)
    off = d2[~np.eye(n_classes, dtype=bool)]
    return {"energy": ((T - 0.5) ** 2).sum(axis=1), "min_sq_distance": float(off.min()),
            "pixels": T.shape[1]}


def inject_gaussian_noise(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) and clamp to [0, 1]."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    images = np.asarray(images, dtype=float)
    if sigma == 0:
        return np.clip(images, 0.0, 1.0)
    return np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0)


def synth_patch_task(spec: DatasetSpec, rng: np.random.Generator, size: int | None = None) -> Dataset:
    """Template images plus clamped Gaussian noise; ``noise`` holds sigma per sample."""
    size = spec.data_size if size is None else size
    T = make_templates(spec.n_classes, spec.image_size, spec.channels)
    labels = _balanced_labels(size, spec.n_classes, rng)
    images = inject_gaussian_noise(T[labels], spec.sigma, rng)
    return Dataset(images, labels.astype(np.int64), spec.n_classes, "vision",
                   noise=np.full(size, spec.sigma))


def nearest_template_oracle(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    X = images.reshape(len(images), -1)
    T = templates.reshape(len(templates), -1)
    d2 = (X * X).sum(1)[:, None] - 2 * X @ T.T + (T * T).sum(1)[None, :]
    return d2.argmin(axis=1)


def patch_oracle_accuracy(ds: Dataset, spec: DatasetSpec) -> float:
    T = make_templates(spec.n_classes, spec.image_size, spec.channels)
    return float((nearest_template_oracle(ds.inputs, T) == ds.labels).mean())


# -- IDX ---------------------------------------------------------------------

IDX_IMAGES, IDX_LABELS = 0x00000803, 0x00000801
_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Raw IDX array, big-endian header: 2 zero bytes, dtype code, ndim, u32 extents."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(raw))
    if raw[0] or raw[1]:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}", 2)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(raw) - header_end
    if have < need:
        raise FormatError(f"{path}: truncated IDX payload, need {need} bytes, have {have}", len(raw))
    if have > need:
        raise FormatError(f"{path}: {have - need} trailing bytes after IDX payload", header_end + need)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in codes:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    code = codes[key]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(array, dtype=_IDX_DTYPES[code]).tobytes())


def load_idx(images_path, labels_path=None, n_classes: int | None = None):
    """Images scaled to [0, 1] as (B, C, H, W) float, plus labels when a path is given.

    The image file must carry magic 0x00000803 (u8, 3-d) or a u8 4-d array
    already laid out as (B, C, H, W); labels must be 0x00000801.
    """
    raw = read_idx(images_path)
    if raw.dtype != np.uint8 or raw.ndim not in (3, 4):
        raise FormatError(f"{images_path}: expected unsigned-byte images (magic 0x00000803)", 0)
    images = raw.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[:, None]
    if labels_path is None:
        return images, None
    labels = read_idx(labels_path)
    if labels.dtype != np.uint8 or labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected unsigned-byte labels (magic 0x00000801)", 0)
    if len(labels) != len(images):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if n_classes is not None and labels.size and labels.max() >= n_classes:
        raise DataError(f"{labels_path}: label {labels.max()} >= n_classes={n_classes}")
    return images, labels.astype(np.int64)


# -- text --------------------------------------------------------------------

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation."""
    return _TOKEN.findall(text.lower())


@dataclass
class Vocab:
    itos: list

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        ids = [self.stoi.get(t, UNK) for t in tokenize(text)][:max_len] or [UNK]
        out = np.full(max_len, PAD, dtype=np.int64)
        out[:len(ids)] = ids
        return out, out != PAD


def build_vocab(corpus, min_freq: int = 2, max_size: int = 60000) -> Vocab:
    """Ids 0/1 are PAD/UNK; tokens ranked by frequency, ties lexicographic."""
    counts = Counter()
    for doc in corpus:
        counts.update(tokenize(doc))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(["<pad>", "<unk>"] + kept[:max(0, max_size)])


def read_tsv(path) -> tuple[list[int], list[str]]:
    """``label<TAB>text`` per line, UTF-8."""
    labels, texts = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            head, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: missing TAB between label and text")
            try:
                labels.append(int(head))
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {head!r} is not an integer") from None
            texts.append(text)
    if not labels:
        raise DataError(f"{path}: no samples")
    return labels, texts


def write_tsv(path, labels, texts) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for y, t in zip(labels, texts):
            fh.write(f"{int(y)}\t{t}\n")


def encode_texts(texts, labels, vocab: Vocab, max_len: int, n_classes: int) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label outside [0, {n_classes})")
    pairs = [vocab.encode(t, max_len) for t in texts]
    ids = np.stack([p[0] for p in pairs])
    mask = np.stack([p[1] for p in pairs])
    return Dataset(ids, labels, n_classes, "text", mask=mask, noise=np.zeros(len(labels)))


def spurious_tokens(ds: Dataset, rate: float, low: int, high: int, rng) -> Dataset:
    """Overwrite each real token with a uniform id in [low, high) with probability ``rate``."""
    hit = (rng.random(ds.inputs.shape) < rate) & (ds.mask if ds.mask is not None else True)
    ids = np.where(hit, rng.integers(low, high, size=ds.inputs.shape), ds.inputs)
    return Dataset(ids, ds.labels, ds.n_classes, ds.kind, ds.mask, hit.sum(axis=1).astype(float))


def stratified_split(labels: np.ndarray, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-class ``frac`` / ``1 - frac`` split of indices, each part sorted."""
    a, b = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(frac * len(idx)))
        a.append(idx[:cut])
        b.append(idx[cut:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


# -- dispatch ----------------------------------------------------------------

def _require(path, what):
    if not path:
        raise ConfigError(f"{what} is required for this data_kind")
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def make_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """(train, test) for ``spec``; deterministic in (spec, data_seed)."""
    spec.validate()
    seeds = np.random.SeedSequence(spec.data_seed).spawn(3)
    rng_train, rng_test, rng_aux = (np.random.default_rng(s) for s in seeds)
    if spec.data_kind == "synth_text":
        if spec.seq_len > spec.max_seq_len:
            raise ConfigError(f"seq_len={spec.seq_len} exceeds max_seq_len={spec.max_seq_len}")
        return (synth_token_task(spec, rng_train),
                synth_token_task(spec, rng_test, size=max(spec.test_size, 1)))
    if spec.data_kind == "synth_vision":
        return (synth_patch_task(spec, rng_train),
                synth_patch_task(spec, rng_test, size=max(spec.test_size, 1)))

    if spec.data_kind == "idx_images":
        images, labels = load_idx(_require(spec.data_path, "data_path"),
                                  _require(spec.labels_path, "labels_path"), spec.n_classes)
        full = Dataset(images, labels, spec.n_classes, "vision", noise=np.zeros(len(labels)))
        if spec.test_path:
            t_img, t_lab = load_idx(_require(spec.test_path, "test_path"),
                                    _require(spec.test_labels_path, "test_labels_path"), spec.n_classes)
            train, test = full, Dataset(t_img, t_lab, spec.n_classes, "vision", noise=np.zeros(len(t_lab)))
        else:
            tr, te = stratified_split(labels, 0.8, rng_aux)
            train, test = full.subset(tr), full.subset(te)
        if train.inputs.shape[1:] != (spec.channels, spec.image_size, spec.image_size):
            raise DataError(f"images are {train.inputs.shape[1:]}, config expects "
                            f"{(spec.channels, spec.image_size, spec.image_size)}")
        if spec.sigma:
            train.inputs = inject_gaussian_noise(train.inputs, spec.sigma, rng_train)
            test.inputs = inject_gaussian_noise(test.inputs, spec.sigma, rng_test)
            train.noise[:] = spec.sigma
            test.noise[:] = spec.sigma
        return train, test

    labels, texts = read_tsv(_require(spec.data_path, "data_path"))
    if spec.test_path:
        t_labels, t_texts = read_tsv(_require(spec.test_path, "test_path"))
    else:
        tr, te = stratified_split(np.asarray(labels), 0.8, rng_aux)
        t_labels, t_texts = [labels[i] for i in te], [texts[i] for i in te]
        labels, texts = [labels[i] for i in tr], [texts[i] for i in tr]
    vocab = build_vocab(texts, spec.min_token_freq, min(spec.max_vocab, spec.vocab_size - 2))
    train = encode_texts(texts, labels, vocab, spec.max_seq_len, spec.n_classes)
    test = encode_texts(t_texts, t_labels, vocab, spec.max_seq_len, spec.n_classes)
    if spec.rate and len(vocab) > 2:
        train = spurious_tokens(train, spec.rate, 2, len(vocab), rng_train)
        test = spurious_tokens(test, spec.rate, 2, len(vocab), rng_test)
    return train, test


def oracle_accuracy(ds: Dataset, spec: DatasetSpec) -> float | None:
    """Analytic-oracle accuracy for synthetic kinds, None otherwise."""
    if spec.data_kind == "synth_text":
        return token_oracle_accuracy(ds, spec)
    if spec.data_kind == "synth_vision":
        return patch_oracle_accuracy(ds, spec)
    return None
