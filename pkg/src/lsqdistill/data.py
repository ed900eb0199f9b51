"""Deterministic synthetic classification tasks for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SyntheticTask", "Dataset", "majority_label", "gen_synthetic_task"]

_MAX_DRAWS_PER_EXAMPLE = 10_000


@dataclass
class SyntheticTask:
    vocab: int = 64
    seq_len: int = 16
    num_classes: int = 2
    rule: str = "majority-token-class"
    train_size: int = 1024
    test_size: int = 256
    seed: int = 0


@dataclass
class Dataset:
    task: SyntheticTask
    train_tokens: np.ndarray
    train_labels: np.ndarray
    test_tokens: np.ndarray
    test_labels: np.ndarray


def majority_label(tokens, vocab: int) -> int:
    """1 iff tokens from the upper vocabulary half outnumber the lower half."""
    tokens = np.asarray(tokens)
    upper = int((tokens >= vocab // 2).sum())
    return int(upper > tokens.size - upper)


def gen_synthetic_task(task: SyntheticTask) -> Dataset:
    """Generate disjoint train/test splits with exactly alternating labels.

    Labels remain a pure function of the tokens; balance comes from
    rejection-sampling sequences until they match the alternating target.
    """
    if task.rule != "majority-token-class":
        raise ValueError(f"unknown generator rule {task.rule!r}")
    if task.num_classes != 2:
        raise ValueError("majority-token-class is a binary rule")
    if task.vocab < 2:
        raise ValueError("need at least 2 tokens to form two classes")

    rng = np.random.Generator(np.random.PCG64(task.seed))
    seen: set[bytes] = set()

    def draw_split(size: int) -> tuple[np.ndarray, np.ndarray]:
        tokens = np.empty((size, task.seq_len), dtype=np.int64)
        labels = np.empty(size, dtype=np.int64)
        for i in range(size):
            target = i % 2
            for _ in range(_MAX_DRAWS_PER_EXAMPLE):
                seq = rng.integers(0, task.vocab, size=task.seq_len)
                if majority_label(seq, task.vocab) != target:
                    continue
                key = seq.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                tokens[i] = seq
                labels[i] = target
                break
            else:
                raise ValueError(
                    f"could not draw a class-{target} sequence; sequence length "
                    f"{task.seq_len} and vocab {task.vocab} are incompatible with balance"
                )
        return tokens, labels

    train_tokens, train_labels = draw_split(task.train_size)
    test_tokens, test_labels = draw_split(task.test_size)
    return Dataset(task=task, train_tokens=train_tokens, train_labels=train_labels,
                   test_tokens=test_tokens, test_labels=test_labels)
