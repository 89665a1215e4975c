#!/usr/bin/env python3
"""
Shared secret material: the car key identity, the key table and the
entropy sources every random draw goes through.
"""
import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

from core.errors import IndexOutOfRange

logger = logging.getLogger('rkesim.keystore')

KEY_TABLE_SIZE = 2000
WORD_BITS = 16
SUM_COUNT = 5

# Park-Miller "minimal standard" generator (revised multiplier)
MINSTD_MODULUS = 2**31 - 1
MINSTD_MULTIPLIER = 48271


@dataclass(frozen=True)
class CipherParams:
    """
    Memory and cipher profile shared by the key table, the cipher and the codec.

    The full-scale profile is 2000 slots of 16 bits with five sums (80 bits).
    Desk-scale profiles shrink the numbers but run through the same code.
    """
    word_bits: int = WORD_BITS
    sum_count: int = SUM_COUNT
    table_size: int = KEY_TABLE_SIZE

    def __post_init__(self):
        if not 1 <= self.word_bits <= 16:
            raise ValueError(f"word_bits must be in [1, 16], got {self.word_bits}")
        if not 1 <= self.sum_count <= 5:
            raise ValueError(f"sum_count must be in [1, 5], got {self.sum_count}")
        if not 1 <= self.table_size <= 65535:
            raise ValueError(f"table_size must be in [1, 65535], got {self.table_size}")

    @property
    def word_modulus(self) -> int:
        return 1 << self.word_bits

    @property
    def index_count(self) -> int:
        return 2 * self.sum_count

    @property
    def message_bits(self) -> int:
        return self.word_bits * self.sum_count


FULL_SCALE = CipherParams()


@dataclass(frozen=True)
class CarKeyId:
    """Unique per-car identity, burnt into ROM."""
    value: int

    def __post_init__(self):
        if not 0 <= self.value <= 0xFFFFFFFF:
            raise ValueError(f"CarKeyId must fit in 32 bits, got {self.value}")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(4, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CarKeyId":
        return cls(int.from_bytes(data[:4], "big"))

    def __str__(self) -> str:
        return f"{self.value:08X}"


class EntropySource(ABC):
    """
    Contract for every random draw in the simulator.
    """

    @abstractmethod
    def next_uniform(self, bound: int) -> int:
        """
        Draw an integer uniform on [0, bound - 1].

        Args:
            bound: Exclusive upper bound (1 <= bound <= 2**32)

        Returns:
            int: The draw
        """

    def draw_many(self, bound: int, count: int) -> Tuple[int, ...]:
        return tuple(self.next_uniform(bound) for _ in range(count))

    @staticmethod
    def _check_bound(bound: int) -> None:
        if not 1 <= bound <= 2**32:
            raise ValueError(f"bound must be in [1, 2**32], got {bound}")


class StrongSource(EntropySource):
    """
    Stand-in for the hardware RNG: SHA-256 in counter mode over the seed,
    with rejection sampling so every bound is exactly uniform.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._key = seed.to_bytes(16, "big", signed=True)
        self._counter = 0
        self._words = []

    def _refill(self) -> None:
        block = hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
        self._counter += 1
        # consumed from the end, so reverse to keep natural order
        self._words = [int.from_bytes(block[i:i + 4], "big") for i in range(28, -1, -4)]

    def _next_word(self) -> int:
        if not self._words:
            self._refill()
        return self._words.pop()

    def next_uniform(self, bound: int) -> int:
        self._check_bound(bound)
        limit = (2**32 // bound) * bound
        while True:
            word = self._next_word()
            if word < limit:
                return word % bound

    def __repr__(self) -> str:
        return f"StrongSource(seed={self.seed})"


class WeakSource(EntropySource):
    """
    Deliberately predictable linear congruential generator.

    Each draw advances the state once and returns `state mod bound`, so any
    observed state determines every later output.
    """

    modulus = MINSTD_MODULUS
    multiplier = MINSTD_MULTIPLIER
    increment = 0

    def __init__(self, seed: int = 1):
        self.seed = seed
        self._state = seed % self.modulus or 1

    @classmethod
    def from_state(cls, state: int) -> "WeakSource":
        source = cls.__new__(cls)
        source.seed = None
        source._state = state
        return source

    @classmethod
    def step(cls, state: int) -> int:
        return (cls.multiplier * state + cls.increment) % cls.modulus

    def next_uniform(self, bound: int) -> int:
        self._check_bound(bound)
        self._state = self.step(self._state)
        return self._state % bound

    def __repr__(self) -> str:
        return f"WeakSource(seed={self.seed})"


def make_entropy(kind: str, seed: int) -> EntropySource:
    """
    Build an entropy source from its configuration name.

    Args:
        kind: 'strong' or 'weak'
        seed: Seed for reproducibility

    Returns:
        EntropySource: The configured source
    """
    kind = kind.lower()
    if kind == "strong":
        return StrongSource(seed)
    if kind == "weak":
        return WeakSource(seed)
    raise ValueError(f"Unknown entropy kind: {kind}")


@dataclass(frozen=True)
class KeyTable:
    """
    The EEPROM contents: `params.table_size` words of `params.word_bits` bits.

    Tables are immutable; provisioning replaces a device's table as a whole.
    """
    values: Tuple[int, ...]
    generation: int = 0
    params: CipherParams = field(default=FULL_SCALE)

    def __post_init__(self):
        values = tuple(self.values)
        object.__setattr__(self, "values", values)
        if len(values) != self.params.table_size:
            raise ValueError(
                f"KeyTable needs exactly {self.params.table_size} values, got {len(values)}"
            )
        modulus = self.params.word_modulus
        for value in values:
            if not 0 <= value < modulus:
                raise ValueError(f"KeyTable value {value} out of range [0, {modulus - 1}]")
        if self.generation < 0:
            raise ValueError("generation must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> int:
        return read_slot(self, index)

    def with_values(self, values: Iterable[int], generation: Optional[int] = None) -> "KeyTable":
        return KeyTable(tuple(values), self.generation if generation is None else generation, self.params)

    def with_generation(self, generation: int) -> "KeyTable":
        return KeyTable(self.values, generation, self.params)

    def same_contents(self, other: "KeyTable") -> bool:
        return self.values == other.values and self.generation == other.generation

    def __repr__(self) -> str:
        # never print the secret values
        return f"KeyTable(size={len(self.values)}, generation={self.generation})"


def new_key_table(entropy: EntropySource, params: CipherParams = FULL_SCALE) -> KeyTable:
    """
    Fill a fresh key table from the entropy source.

    Args:
        entropy: Source of the random words
        params: Memory profile (full scale by default)

    Returns:
        KeyTable: New table with generation 0
    """
    modulus = params.word_modulus
    values = [entropy.next_uniform(modulus) for _ in range(params.table_size)]
    logger.debug(f"Generated key table of {params.table_size} words with {entropy!r}")
    return KeyTable(tuple(values), 0, params)


def read_slot(table: KeyTable, index: int) -> int:
    """
    Read one slot of the table.

    Args:
        table: The key table
        index: Slot index

    Returns:
        int: The stored word

    Raises:
        IndexOutOfRange: If the index is outside the table (malformed challenge)
    """
    if not 0 <= index < len(table.values):
        raise IndexOutOfRange(f"slot {index} outside table of {len(table.values)}")
    return table.values[index]


def read_slots(table: KeyTable, indices: Sequence[int]) -> Tuple[int, ...]:
    return tuple(read_slot(table, index) for index in indices)
