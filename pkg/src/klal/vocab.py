"""Fixed token table and prompt templates."""

from __future__ import annotations

SPECIALS = ["<pad>", "<bos>", "<eos>", "<img>", "<sys>"]
DIGITS = [str(d) for d in range(10)]
ANSWERS = ["yes", "no"]
LETTERS = list("ABCDEFG")
COORDS = [f"c{k}" for k in range(24)]
WORDS = "how many times do the blue and red lines touch each other ? is node connected to where square".split()

TOKENS = SPECIALS + DIGITS + ANSWERS + LETTERS + COORDS + WORDS
assert len(set(TOKENS)) == len(TOKENS)

TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
PAD, BOS, EOS, IMG, SYS = (TOKEN_ID[t] for t in SPECIALS)
VOCAB_SIZE = len(TOKENS)

SYSTEM_PROMPT = ("<bos>", "<sys>")
INTERSECTION_PROMPT = "how many times do the blue and red lines touch each other ?"
TRACING_PROMPT = "is node {a} connected to node {b} ?"
GRIDPATCH_PROMPT = "where is the red square ?"


def encode(text: str | tuple[str, ...] | list[str]) -> tuple[int, ...]:
    words = text.split() if isinstance(text, str) else text
    try:
        return tuple(TOKEN_ID[w] for w in words)
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


def decode(ids) -> list[str]:
    return [TOKENS[i] for i in ids]
