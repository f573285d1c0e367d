"""Additively homomorphic secure aggregation of parameter updates.

Scheme (honest-but-curious aggregator): a trusted dealer issues each node a
secret s_k and the aggregator s_0 with s_0 + sum(s_k) = 0. For a public
modulus M = p*q, node k encrypts integer m at coordinate j of round tag t as

    c = (1 + m*M) * H(t, j)^(s_k)  mod M^2

The aggregator multiplies the cohort's ciphertexts with H(t, j)^(s_0); the
mask exponents cancel only over the *full* cohort, leaving 1 + (sum m)*M,
from which the sum is read off exactly. Any single ciphertext stays masked.

Real-valued updates ride through fixed-point quantization; weighted FedAvg
is obtained by having nodes pre-scale their quantized update by their sample
count and summing the counts through a second instance of the scheme.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import gmpy2
import numpy as np

from .errors import (
    CohortIncomplete,
    MalformedBlob,
    MessageTooLarge,
    SecaggDecryptionError,
    TagMismatch,
    TagReused,
    TooFewNodes,
)
from .mlcore.params import ParamVector
from .util import atomic_write_text

DEFAULT_MODULUS_BITS = 2048
DEFAULT_CLIP_RANGE = 10.0
DEFAULT_BITS = 16

KEY_FILE_VERSION = "1"


@dataclass(frozen=True)
class QuantizationScheme:
    """Fixed-point map [-c, c] -> [0, 2^b - 1]; out-of-range values clip."""

    clip_range: float = DEFAULT_CLIP_RANGE
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if not self.clip_range > 0:
            raise MalformedBlob("clip_range must be positive")
        if not 8 <= self.bits <= 32:
            raise MalformedBlob("bits must be in [8, 32]")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


def quantize(params: ParamVector, scheme: QuantizationScheme) -> tuple:
    """Returns (integer list, clip count). Round-trip error for in-range
    values is at most clip_range / (2^bits - 1)."""
    c = scheme.clip_range
    flat = params.to_flat()
    clipped = np.clip(flat, -c, c)
    clip_count = int(np.sum((flat < -c) | (flat > c)))
    q = np.rint((clipped + c) / (2.0 * c) * scheme.levels).astype(np.int64)
    return [int(v) for v in q], clip_count


def dequantize(ints: Sequence[int], scheme: QuantizationScheme,
               n_addends: int, layout: Sequence[tuple]) -> ParamVector:
    """Invert quantize on a sum of ``n_addends`` quantized vectors.

    Each addend contributed one +c offset, so the offset is rescaled by
    n_addends before mapping back to reals.
    """
    if n_addends < 1:
        raise SecaggDecryptionError("n_addends must be >= 1")
    c = scheme.clip_range
    arr = np.asarray([int(v) for v in ints], dtype=np.float64)
    values = arr / scheme.levels * (2.0 * c) - n_addends * c
    return ParamVector.from_flat(tuple(layout), values)


@dataclass(frozen=True)
class SecaggKeyMaterial:
    """Zero-sum key material issued by the dealer ceremony."""

    modulus_bits: int
    modulus: int
    node_secrets: Mapping[str, int]
    aggregator_secret: int

    def __post_init__(self):
        object.__setattr__(self, "node_secrets", dict(self.node_secrets))
        if self.modulus_bits < 64:
            raise MalformedBlob("modulus_bits must be >= 64")
        if self.aggregator_secret + sum(self.node_secrets.values()) != 0:
            raise MalformedBlob("secrets do not satisfy the zero-sum property")

    @property
    def cohort(self) -> tuple:
        return tuple(sorted(self.node_secrets))


def keygen(node_ids: Sequence[str], modulus_bits: int = DEFAULT_MODULUS_BITS,
           seed: int = 0) -> SecaggKeyMaterial:
    """Trusted-dealer key generation; deterministic given the seed."""
    node_ids = list(node_ids)
    if len(node_ids) < 2:
        raise TooFewNodes("secure aggregation needs at least 2 nodes")
    if len(set(node_ids)) != len(node_ids):
        raise MalformedBlob("node ids must be unique")
    if modulus_bits < 64:
        raise MalformedBlob("modulus_bits must be >= 64")
    rng = random.Random(seed)
    half = modulus_bits // 2
    p = int(gmpy2.next_prime(rng.getrandbits(half) | (1 << (half - 1))))
    q = int(gmpy2.next_prime(rng.getrandbits(modulus_bits - half)
                             | (1 << (modulus_bits - half - 1))))
    while q == p:
        q = int(gmpy2.next_prime(rng.getrandbits(modulus_bits - half)
                                 | (1 << (modulus_bits - half - 1))))
    modulus = p * q
    secrets = {node_id: rng.getrandbits(2 * modulus_bits)
               for node_id in sorted(node_ids)}
    aggregator_secret = -sum(secrets.values())
    return SecaggKeyMaterial(modulus_bits=modulus_bits, modulus=modulus,
                             node_secrets=secrets,
                             aggregator_secret=aggregator_secret)


@dataclass(frozen=True)
class Ciphertext:
    round_tag: int
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def to_dict(self) -> dict:
        return {"round_tag": self.round_tag, "values": list(self.values)}

    @classmethod
    def from_dict(cls, data) -> "Ciphertext":
        try:
            return cls(round_tag=int(data["round_tag"]),
                       values=tuple(int(v) for v in data["values"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBlob(f"bad ciphertext: {exc}") from exc


def round_tag(experiment_id: str, round_index: int, instance: str = "params") -> int:
    """Fold the round identity into the tag integer (SHA-256 based)."""
    label = f"{experiment_id}\x1f{round_index}\x1f{instance}"
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:16], "big")


@lru_cache(maxsize=16384)
def _hash_to_group(tag: int, index: int, modulus: int) -> int:
    """Derive the per-coordinate masking base in Z*_{M^2}."""
    m2 = modulus * modulus
    counter = 0
    while True:
        material = b""
        chunks = (m2.bit_length() // 8) // 32 + 2
        for i in range(chunks):
            material += hashlib.sha256(
                f"fedbed-secagg\x1f{tag}\x1f{index}\x1f{counter}\x1f{i}".encode()
            ).digest()
        candidate = int.from_bytes(material, "big") % m2
        if candidate > 1 and gmpy2.gcd(candidate, m2) == 1:
            return candidate
        counter += 1


def message_space_bound(modulus: int) -> int:
    """Per-coordinate plaintext cap with headroom for 2^32 addends."""
    return modulus >> 32


def encrypt(ints: Sequence[int], secret: int, tag: int, modulus: int) -> Ciphertext:
    m2 = modulus * modulus
    bound = message_space_bound(modulus)
    values = []
    for j, m in enumerate(ints):
        m = int(m)
        if not 0 <= m < bound:
            raise MessageTooLarge(f"coordinate {j}: {m} outside [0, {bound})")
        base = _hash_to_group(tag, j, modulus)
        mask = int(gmpy2.powmod(base, secret, m2))
        values.append((1 + m * modulus) * mask % m2)
    return Ciphertext(round_tag=tag, values=tuple(values))


def aggregate_decrypt(ciphertexts: Sequence[Ciphertext], aggregator_secret: int,
                      tag: int, n_addends: int, modulus: int, cohort_size: int,
                      max_plaintext: Optional[int] = None) -> list:
    """Recover the exact per-coordinate sum over the full cohort.

    ``n_addends`` must equal the key-holding cohort size; with any ciphertext
    missing the masks cannot cancel, and the result fails the plaintext-range
    sanity check instead of passing off a wrong sum.
    """
    if n_addends != cohort_size:
        raise CohortIncomplete(
            f"n_addends={n_addends} but the keyed cohort has {cohort_size} nodes")
    if len(ciphertexts) != n_addends:
        raise CohortIncomplete(
            f"expected {n_addends} ciphertexts, got {len(ciphertexts)}")
    for ct in ciphertexts:
        if ct.round_tag != tag:
            raise TagMismatch(f"ciphertext tag {ct.round_tag} != round tag {tag}")
    lengths = {len(ct.values) for ct in ciphertexts}
    if len(lengths) != 1:
        raise SecaggDecryptionError("ciphertext lengths differ")
    m2 = modulus * modulus
    if max_plaintext is None:
        max_plaintext = (1 << DEFAULT_BITS) - 1
    limit = n_addends * max_plaintext
    sums = []
    for j in range(lengths.pop()):
        base = _hash_to_group(tag, j, modulus)
        acc = int(gmpy2.powmod(base, aggregator_secret, m2))
        for ct in ciphertexts:
            acc = acc * ct.values[j] % m2
        body = acc - 1
        if body % modulus != 0:
            raise SecaggDecryptionError(f"coordinate {j}: masks did not cancel")
        total = body // modulus
        if total > limit:
            raise SecaggDecryptionError(
                f"coordinate {j}: sum {total} fails the plaintext-range "
                f"sanity check (limit {limit})")
        sums.append(int(total))
    return sums


class TagLedger:
    """Node-side replay guard: one plaintext vector per round tag."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seen: dict = {}

    def check_and_record(self, tag: int, ints: Sequence[int]) -> None:
        digest = hashlib.sha256(
            json.dumps([int(v) for v in ints]).encode()).hexdigest()
        with self._lock:
            previous = self._seen.get(tag)
            if previous is not None and previous != digest:
                raise TagReused(f"round tag {tag} already used with a "
                                f"different plaintext")
            self._seen[tag] = digest


def encrypt_once(ledger: TagLedger, ints: Sequence[int], secret: int, tag: int,
                 modulus: int) -> Ciphertext:
    """Encrypt with the replay guard engaged."""
    ledger.check_and_record(tag, ints)
    return encrypt(ints, secret, tag, modulus)


# --- key files ----------------------------------------------------------------

def write_key_files(material: SecaggKeyMaterial, out_dir) -> list:
    """One file per node plus the researcher file; returns written paths.

    Key files are plain JSON; keep them on the owning host with restrictive
    permissions (the dealer is expected to distribute them out of band).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cohort = list(material.cohort)
    for node_id, secret in sorted(material.node_secrets.items()):
        path = out_dir / f"secagg_node_{node_id}.json"
        atomic_write_text(path, json.dumps({
            "format_version": KEY_FILE_VERSION,
            "role": "node",
            "node_id": node_id,
            "secret": secret,
            "modulus": material.modulus,
            "modulus_bits": material.modulus_bits,
            "cohort": cohort,
        }, indent=2))
        written.append(path)
    researcher_path = out_dir / "secagg_researcher.json"
    atomic_write_text(researcher_path, json.dumps({
        "format_version": KEY_FILE_VERSION,
        "role": "researcher",
        "secret": material.aggregator_secret,
        "modulus": material.modulus,
        "modulus_bits": material.modulus_bits,
        "cohort": cohort,
    }, indent=2))
    written.append(researcher_path)
    return written


@dataclass(frozen=True)
class KeyFile:
    """One party's share of the ceremony output."""

    role: str
    secret: int
    modulus: int
    modulus_bits: int
    cohort: tuple
    node_id: Optional[str] = None


def read_key_file(path) -> KeyFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedBlob(f"cannot read key file {path}: {exc}") from exc
    if doc.get("format_version") != KEY_FILE_VERSION:
        raise MalformedBlob(f"unsupported key file version in {path}")
    try:
        return KeyFile(role=doc["role"], secret=int(doc["secret"]),
                       modulus=int(doc["modulus"]),
                       modulus_bits=int(doc["modulus_bits"]),
                       cohort=tuple(doc["cohort"]),
                       node_id=doc.get("node_id"))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedBlob(f"bad key file {path}: {exc}") from exc
