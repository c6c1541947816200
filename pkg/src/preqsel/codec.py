"""Arithmetic coding of labels under prequential model predictions.

Container layout (all integers big-endian)::

    b"PQDL" | version: u16 | header_len: u32 | header: UTF-8 JSON | payload

The header is canonical JSON (sorted keys, no whitespace). The payload is
the coder's bit string, MSB first, zero-padded to a byte boundary; its
exact length in bits is ``header["bit_length"]``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .prequential import BlockSchedule, TrainingRecipe, block_predictions, floor_probs, prequential_order

MAGIC = b"PQDL"
VERSION = 1
STATE_BITS = 32
_TOP = (1 << STATE_BITS) - 1
_HALF = 1 << (STATE_BITS - 1)
_QUARTER = 1 << (STATE_BITS - 2)


class DecodeError(ValueError):
    pass


class DeterminismError(RuntimeError):
    """Decoder-side retraining diverged from the encoder's recorded trace."""


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    freqs: np.ndarray

    def __post_init__(self):
        cum = np.concatenate([[0], np.cumsum(self.freqs)]).astype(np.int64)
        object.__setattr__(self, "cumulative", cum)

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])

    def code_bits(self, symbol: int) -> float:
        return -math.log2(int(self.freqs[symbol]) / self.total)


def quantize(probs, precision: int = 16) -> FrequencyTable:
    """Integer frequencies summing to ``2**precision``, each at least 1.

    Every class gets 1 up front; the remaining mass is split by largest
    remainder, ties going to the lower class index.
    """
    p = np.asarray(probs, dtype=np.float64)
    total = 1 << precision
    k = p.shape[0]
    if k < 1 or k > total - k:
        raise ValueError(f"{k} classes do not fit in {precision}-bit frequencies")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("probabilities must be finite and non-negative")
    p = p / p.sum()
    spare = total - k
    scaled = p * spare
    base = np.floor(scaled).astype(np.int64)
    rem = spare - int(base.sum())
    if rem > 0:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:rem]] += 1
    return FrequencyTable(base + 1)


class Encoder:
    """Binary arithmetic coder with 32-bit registers and pending-bit carries."""

    def __init__(self):
        self.low = 0
        self.high = _TOP
        self.pending = 0
        self.bits: list[int] = []

    def _emit(self, bit: int) -> None:
        self.bits.append(bit)
        self.bits.extend([bit ^ 1] * self.pending)
        self.pending = 0

    def encode(self, table: FrequencyTable, symbol: int) -> None:
        cum = table.cumulative
        rng = self.high - self.low + 1
        total = table.total
        self.high = self.low + (rng * int(cum[symbol + 1])) // total - 1
        self.low = self.low + (rng * int(cum[symbol])) // total
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < 3 * _QUARTER:
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1

    def finish(self) -> list[int]:
        self.pending += 1
        self._emit(0 if self.low < _QUARTER else 1)
        return self.bits


class Decoder:
    def __init__(self, bits):
        self.bits = bits
        self.pos = 0
        self.low = 0
        self.high = _TOP
        self.value = 0
        for _ in range(STATE_BITS):
            self.value = (self.value << 1) | self._read()

    def _read(self) -> int:
        bit = self.bits[self.pos] if self.pos < len(self.bits) else 0
        self.pos += 1
        return bit

    def decode(self, table: FrequencyTable) -> int:
        cum = table.cumulative
        rng = self.high - self.low + 1
        total = table.total
        offset = self.value - self.low
        if offset < 0 or self.value > self.high:
            raise DecodeError("corrupted stream: code value left the coding interval")
        scaled = ((offset + 1) * total - 1) // rng
        symbol = int(np.searchsorted(cum, scaled, side="right")) - 1
        if not 0 <= symbol < len(cum) - 1:
            raise DecodeError("corrupted stream: no symbol matches")
        self.high = self.low + (rng * int(cum[symbol + 1])) // total - 1
        self.low = self.low + (rng * int(cum[symbol])) // total
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.value -= _HALF
            elif self.low >= _QUARTER and self.high < 3 * _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.value -= _QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.value = (self.value << 1) | self._read()
        return symbol


def encode_symbols(tables, symbols) -> list[int]:
    enc = Encoder()
    for t, s in zip(tables, symbols):
        enc.encode(t, int(s))
    return enc.finish()


def decode_symbols(tables, bits) -> list[int]:
    dec = Decoder(bits)
    return [dec.decode(t) for t in tables]


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes() if len(bits) else b""


def unpack_bits(payload: bytes, bit_length: int) -> list[int]:
    if bit_length > 8 * len(payload):
        raise DecodeError("payload shorter than its declared bit length")
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:bit_length].tolist()


@dataclass(frozen=True)
class EncodedMessage:
    header: dict
    payload: bytes

    @property
    def bit_length(self) -> int:
        return int(self.header["bit_length"])

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack(">HI", VERSION, len(head)) + head + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncodedMessage":
        if blob[:4] != MAGIC:
            raise DecodeError("not a PQDL message")
        if len(blob) < 10:
            raise DecodeError("truncated message header")
        version, n = struct.unpack(">HI", blob[4:10])
        if version != VERSION:
            raise DecodeError(f"unsupported message version {version}")
        try:
            header = json.loads(blob[10:10 + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DecodeError(f"unreadable header: {exc}") from None
        return cls(header, blob[10 + n:])


def _labels_checksum(labels) -> str:
    return hashlib.sha256(np.asarray(labels, dtype="<i8").tobytes()).hexdigest()


def _uniform_table(k: int, precision: int) -> FrequencyTable:
    return quantize(floor_probs(np.full((1, k), 1.0 / k))[0], precision)


def encode_dataset(dataset: Dataset, recipe: TrainingRecipe, schedule: BlockSchedule, seed: int,
                   precision: int = 16, extra_header: dict | None = None) -> EncodedMessage:
    """Compress the labels of ``dataset`` given its inputs, block by block.

    The header records ``shannon_bits`` (sum of -log2 q over the quantized
    tables) and ``dl_nats`` (sum of -ln p over the floored predictions) so
    the bitstream can be checked against both.
    """
    k = dataset.num_classes
    order = prequential_order(dataset, schedule, seed)
    ordered = dataset.take(order)
    tables, digests, lrs = [], [], []
    nats = [math.log(k)] * schedule.n0
    tables += [_uniform_table(k, precision)] * schedule.n0
    for i, run, probs in block_predictions(recipe, ordered.x, ordered.y, k, schedule, seed):
        lo, hi = schedule.boundaries[i - 1], schedule.boundaries[i]
        y = ordered.y[lo:hi]
        nats += (-np.log(probs[np.arange(hi - lo), y])).tolist()
        tables += [quantize(p, precision) for p in probs]
        digests.append(run.digest())
        lrs.append(run.lr0)
    bits = encode_symbols(tables, ordered.y)
    shannon = math.fsum(t.code_bits(int(s)) for t, s in zip(tables, ordered.y))
    header = {
        "version": VERSION,
        "dataset_id": dataset.input_digest(),
        "n": len(dataset),
        "num_classes": k,
        "model_hash": recipe.model.digest(),
        "recipe": recipe.to_dict(),
        "schedule": list(schedule.boundaries),
        "seed": seed,
        "precision": precision,
        "block_digests": digests,
        "block_lrs": lrs,
        "labels_sha256": _labels_checksum(dataset.y),
        "bit_length": len(bits),
        "shannon_bits": shannon,
        "dl_nats": math.fsum(nats),
    }
    if extra_header:
        header.update(extra_header)
    return EncodedMessage(header, pack_bits(bits))


def decode_dataset(message: EncodedMessage, inputs) -> np.ndarray:
    """Recover the labels by replaying the sender's training on decoded prefixes."""
    h = message.header
    if h.get("version") != VERSION:
        raise DecodeError(f"unsupported message version {h.get('version')}")
    n = int(h["n"])
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = int(h["num_classes"])
    x = np.asarray(inputs, dtype=np.float64).reshape(n, -1)
    placeholder = Dataset(x, np.zeros(n, dtype=np.int64), k)
    if placeholder.input_digest() != h["dataset_id"]:
        raise DecodeError("inputs do not match the message's dataset id")
    recipe = TrainingRecipe.from_dict(h["recipe"])
    if recipe.model.digest() != h["model_hash"]:
        raise DecodeError("model hash does not match the recipe in the header")
    schedule = BlockSchedule(tuple(h["schedule"]))
    seed = int(h["seed"])
    precision = int(h["precision"])
    order = prequential_order(placeholder, schedule, seed)
    x_ordered = x[order]
    dec = Decoder(unpack_bits(message.payload, message.bit_length))
    y = np.zeros(n, dtype=np.int64)
    uniform = _uniform_table(k, precision)
    for j in range(schedule.n0):
        y[j] = dec.decode(uniform)
    for i, run, probs in block_predictions(recipe, x_ordered, y, k, schedule, seed):
        if run.digest() != h["block_digests"][i - 1]:
            raise DeterminismError(f"block {i}: retrained parameters differ from the encoder's")
        lo = schedule.boundaries[i - 1]
        for j, p in enumerate(probs):
            y[lo + j] = dec.decode(quantize(p, precision))
    labels = np.empty(n, dtype=np.int64)
    labels[order] = y
    if _labels_checksum(labels) != h["labels_sha256"]:
        raise DecodeError("decoded labels fail the checksum")
    return labels
