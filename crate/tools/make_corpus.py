#!/usr/bin/env python3
"""Regenerates data/corpus.txt.

The training corpus is synthetic English-like prose from a small templated
grammar: enough byte-level structure (spelling, spacing, punctuation,
collocations) for a tiny transformer to learn something measurable, with no
licensing baggage. Deterministic for a fixed seed; the checked-in corpus
was produced by running this script with its defaults.
"""

import argparse
import random

SUBJECTS = [
    "the cache", "a deep layer", "the scheduler", "the first token",
    "a long prompt", "the residual stream", "every attention head",
    "the decoder", "a skipped block", "the profiler", "the byte stream",
    "the final norm", "a rotary angle", "the value projection",
    "the key buffer", "a gating scalar", "the loss curve", "the optimizer",
    "a held-out window", "the sampler",
]

VERBS = [
    "records", "rewrites", "amortizes", "preserves", "shortens",
    "absorbs", "predicts", "stabilizes", "reorders", "accumulates",
    "projects", "attenuates", "caches", "replays", "balances",
    "normalizes", "shadows", "tracks", "interleaves", "anchors",
]

OBJECTS = [
    "the next position", "its own history", "a quadratic cost",
    "the shared context", "each rotation", "the running mean",
    "a stale entry", "the deepest branch", "one extra pass",
    "the measured latency", "a sparse window", "the gradient signal",
    "every cached row", "the prompt boundary", "a small remainder",
    "the causal mask", "its learning rate", "the byte alphabet",
    "a fresh seed", "the skip set",
]

MODIFIERS = [
    "during prefill", "at decode time", "after the boundary step",
    "without extra memory", "under a fixed budget", "once per layer",
    "in strict order", "before sampling", "behind the mask",
    "across the batch", "at full depth", "with the gate closed",
    "near the surface", "over long contexts", "between checkpoints",
]

CONNECTIVES = [
    "meanwhile", "in practice", "by contrast", "as a result",
    "even so", "for deep stacks", "at larger scales", "in the limit",
]


def sentence(rng: random.Random) -> str:
    s = rng.choice(SUBJECTS)
    v = rng.choice(VERBS)
    o = rng.choice(OBJECTS)
    parts = [s, v, o]
    if rng.random() < 0.6:
        parts.append(rng.choice(MODIFIERS))
    text = " ".join(parts)
    if rng.random() < 0.2:
        text = f"{rng.choice(CONNECTIVES)}, {text}"
    return text[0].upper() + text[1:] + "."


def paragraph(rng: random.Random) -> str:
    return " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=20240817)
    ap.add_argument("--bytes", type=int, default=100_000)
    ap.add_argument("--out", default="data/corpus.txt")
    args = ap.parse_args()

    rng = random.Random(args.seed)
    chunks = []
    size = 0
    while size < args.bytes:
        p = paragraph(rng) + "\n\n"
        chunks.append(p)
        size += len(p.encode("utf-8"))
    text = "".join(chunks)[: args.bytes]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(f"wrote {len(text.encode('utf-8'))} bytes to {args.out}")


if __name__ == "__main__":
    main()
