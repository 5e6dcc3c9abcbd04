"""Synthetic token world with harmful prompts, a refusal token and two downstream tasks.

Vocabulary layout, in order: filler tokens, task tokens, harmful-topic
tokens, one REFUSE token, compliance tokens (one per harmful topic) and
answer tokens. A task prompt is a context of task and filler tokens; its
answer is chosen by the majority class of its task tokens. The general task
and the downstream task map classes to answers through different
permutations, so the downstream task has to be learned by fine-tuning. A
harmful prompt mixes tokens of one harmful topic into a task prompt; an
aligned model answers it with REFUSE, a compromised one with that topic's
compliance token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .refmodel import Batch


@dataclass(frozen=True)
class SafetyWorld:
    n_filler: int = 4
    n_task: int = 16
    n_harm: int = 8
    n_topics: int = 4
    n_answers: int = 4
    context_len: int = 8
    harm_tokens_per_prompt: tuple[int, int] = (2, 4)

    @property
    def task_tokens(self) -> np.ndarray:
        return np.arange(self.n_filler, self.n_filler + self.n_task)

    @property
    def harm_tokens(self) -> np.ndarray:
        start = self.n_filler + self.n_task
        return np.arange(start, start + self.n_harm)

    @property
    def refuse(self) -> int:
        return self.n_filler + self.n_task + self.n_harm

    @property
    def comply_tokens(self) -> np.ndarray:
        return np.arange(self.refuse + 1, self.refuse + 1 + self.n_topics)

    @property
    def answer_tokens(self) -> np.ndarray:
        start = self.refuse + 1 + self.n_topics
        return np.arange(start, start + self.n_answers)

    @property
    def vocab_size(self) -> int:
        return int(self.answer_tokens[-1]) + 1

    def task_class(self, tok):
        return (np.asarray(tok) - self.n_filler) % self.n_answers

    def harm_topic(self, tok):
        return (np.asarray(tok) - self.harm_tokens[0]) % self.n_topics

    def _task_prompts(self, rng, n):
        """Prompts with a strict majority class among their task tokens."""
        ctx = self.context_len
        inputs = np.empty((n, ctx), np.int64)
        classes = np.empty(n, np.int64)
        by_class = [self.task_tokens[self.task_class(self.task_tokens) == c] for c in range(self.n_answers)]
        for i in range(n):
            c = rng.integers(self.n_answers)
            n_major = rng.integers(ctx // 2 + 1, ctx + 1)
            others = [k for k in range(self.n_answers) if k != c]
            row = list(rng.choice(by_class[c], n_major))
            for _ in range(ctx - n_major):
                if rng.random() < 0.5:
                    row.append(int(rng.integers(self.n_filler)))
                else:
                    row.append(int(rng.choice(by_class[others[rng.integers(len(others))]])))
            inputs[i] = rng.permutation(row)
            classes[i] = c
        return inputs, classes

    def task_batch(self, rng, n: int, task: str = "downstream") -> Batch:
        inputs, classes = self._task_prompts(rng, n)
        perm = self.answer_permutation(task)
        return Batch(inputs, self.answer_tokens[perm[classes]])

    def answer_permutation(self, task: str) -> np.ndarray:
        base = np.arange(self.n_answers)
        if task == "general":
            return base
        if task == "downstream":
            return np.roll(base, 1)
        raise ValueError(f"unknown task {task!r}")

    def harmful_batch(self, rng, n: int, target: str = "refuse") -> Batch:
        """Harmful prompts answered with REFUSE (``target="refuse"``) or compliance (``"comply"``)."""
        inputs, _ = self._task_prompts(rng, n)
        topics = rng.integers(self.n_topics, size=n)
        lo, hi = self.harm_tokens_per_prompt
        for i in range(n):
            k = rng.integers(lo, hi + 1)
            pos = rng.choice(self.context_len, k, replace=False)
            pool = self.harm_tokens[self.harm_topic(self.harm_tokens) == topics[i]]
            inputs[i, pos] = rng.choice(pool, k)
        if target == "refuse":
            targets = np.full(n, self.refuse)
        elif target == "comply":
            targets = self.comply_tokens[topics]
        else:
            raise ValueError(f"unknown target {target!r}")
        return Batch(inputs, targets)
