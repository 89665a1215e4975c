#!/usr/bin/env python3
"""
Challenge generation and the lightweight additive cipher that turns a
challenge into an authentication message.

The first half of a challenge selects the "key" slots, the second half the
"encryption" slots; sum j is slot[first[j]] + slot[second[j]] modulo the
word size.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.keystore import (
    FULL_SCALE, CipherParams, EntropySource, KeyTable, read_slot
)

logger = logging.getLogger('rkesim.authcrypt')


@dataclass(frozen=True)
class Challenge:
    """
    2k slot indices. Indices are kept as received; `is_valid` checks them
    against a table size so malformed challenges surface at read time.
    """
    indices: Tuple[int, ...]

    def __post_init__(self):
        indices = tuple(self.indices)
        object.__setattr__(self, "indices", indices)
        if len(indices) == 0 or len(indices) % 2:
            raise ValueError(f"Challenge needs an even, non-zero number of indices, got {len(indices)}")
        for index in indices:
            if not 0 <= index <= 0xFFFF:
                raise ValueError(f"Challenge index {index} does not fit in 16 bits")

    @property
    def sum_count(self) -> int:
        return len(self.indices) // 2

    @property
    def key_indices(self) -> Tuple[int, ...]:
        return self.indices[:self.sum_count]

    @property
    def encryption_indices(self) -> Tuple[int, ...]:
        return self.indices[self.sum_count:]

    def is_valid(self, params: CipherParams = FULL_SCALE) -> bool:
        return (len(self.indices) == params.index_count
                and all(index < params.table_size for index in self.indices))


@dataclass(frozen=True)
class AuthMessage:
    """k modular sums; 5 x 16 bits = 80 bits at full scale."""
    sums: Tuple[int, ...]

    def __post_init__(self):
        sums = tuple(self.sums)
        object.__setattr__(self, "sums", sums)
        if not 1 <= len(sums) <= 5:
            raise ValueError(f"AuthMessage needs 1..5 sums, got {len(sums)}")
        for value in sums:
            if not 0 <= value <= 0xFFFF:
                raise ValueError(f"AuthMessage sum {value} does not fit in 16 bits")


def generate_challenge(entropy: EntropySource, params: CipherParams = FULL_SCALE) -> Challenge:
    """
    Draw 2k independent slot indices; repeats are allowed.

    Args:
        entropy: Source of the indices
        params: Cipher profile (index count and table size)

    Returns:
        Challenge: The new challenge
    """
    return Challenge(tuple(entropy.next_uniform(params.table_size) for _ in range(params.index_count)))


def build_auth_message(table: KeyTable, challenge: Challenge) -> AuthMessage:
    """
    Build the authentication message for a challenge.

    Args:
        table: Key table of the device answering
        challenge: Received or generated challenge

    Returns:
        AuthMessage: sums[j] = (table[idx[j]] + table[idx[j + k]]) mod 2^w

    Raises:
        IndexOutOfRange: If the challenge references a slot outside the table
        ValueError: If the challenge length does not match the table profile
    """
    params = table.params
    k = params.sum_count
    if challenge.sum_count != k:
        raise ValueError(f"Challenge has {challenge.sum_count} pairs, profile expects {k}")
    modulus = params.word_modulus
    indices = challenge.indices
    return AuthMessage(tuple(
        (read_slot(table, indices[j]) + read_slot(table, indices[j + k])) % modulus
        for j in range(k)
    ))


def verify_auth_message(table: KeyTable, challenge: Challenge, received: AuthMessage) -> bool:
    """
    Compare a received message with the locally built one.

    Args:
        table: Verifier's key table
        challenge: Challenge the verifier issued
        received: Message from the other side

    Returns:
        bool: True iff every sum matches
    """
    expected = build_auth_message(table, challenge)
    return expected.sums == received.sums


def affected_sums(challenge: Challenge, slot: int) -> List[int]:
    """
    Positions of the sums that read a given slot.

    Args:
        challenge: The challenge
        slot: Table slot

    Returns:
        List[int]: Sum positions (each at most once)
    """
    k = challenge.sum_count
    return [j for j in range(k)
            if challenge.indices[j] == slot or challenge.indices[j + k] == slot]


def estimate_guess_rate(params: CipherParams, trials: int, entropy: EntropySource,
                        tables: int = 100) -> Tuple[int, float]:
    """
    Monte-Carlo rate at which a uniformly random message passes verification.

    Uses `tables` independent key tables and fresh random challenges for each
    trial, vectorised with numpy.

    Args:
        params: Cipher profile
        trials: Number of guesses
        entropy: Seeds the numpy generator
        tables: Number of distinct key tables the trials are spread over

    Returns:
        Tuple[int, float]: (hits, hits / trials)
    """
    rng = np.random.default_rng(entropy.next_uniform(2**32))
    modulus = params.word_modulus
    k = params.sum_count
    hits = 0
    batches = np.array_split(np.arange(trials), max(1, min(tables, trials)))
    for batch in batches:
        n = len(batch)
        if n == 0:
            continue
        table = rng.integers(0, modulus, params.table_size, dtype=np.int64)
        challenges = rng.integers(0, params.table_size, (n, 2 * k), dtype=np.int64)
        sums = (table[challenges[:, :k]] + table[challenges[:, k:]]) % modulus
        guesses = rng.integers(0, modulus, (n, k), dtype=np.int64)
        hits += int(np.count_nonzero(np.all(sums == guesses, axis=1)))
    rate = hits / trials if trials else 0.0
    logger.debug(f"Guess-rate estimate for {params}: {hits}/{trials}")
    return hits, rate


def sum_distribution(params: CipherParams, distinct_only: bool = False) -> np.ndarray:
    """
    Exact distribution of one sum over every table and every index pair.

    Enumerates each index pair of the profile and every assignment of the
    referenced slots; the other slots do not influence the sum, so this is
    the full enumeration over all tables up to a constant factor.

    Args:
        params: Toy profile (word_bits small enough to enumerate)
        distinct_only: Skip pairs that reference the same slot twice

    Returns:
        np.ndarray: counts[s] for s in [0, 2^w)
    """
    modulus = params.word_modulus
    values = np.arange(modulus, dtype=np.int64)
    pair_sums = (values[:, None] + values[None, :]) % modulus
    distinct_counts = np.bincount(pair_sums.ravel(), minlength=modulus)
    # same slot on both sides: 2a mod 2^w, weighted to the same total mass
    same_counts = np.bincount((2 * values) % modulus, minlength=modulus) * modulus

    n = params.table_size
    counts = distinct_counts * (n * (n - 1))
    if not distinct_only:
        counts = counts + same_counts * n
    return counts


def expected_guess_probability(params: CipherParams) -> float:
    return 1.0 / float(2 ** params.message_bits)
