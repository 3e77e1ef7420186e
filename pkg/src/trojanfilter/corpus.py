"""Clean training text: a seeded template-grammar story generator and a plain-text loader."""
from __future__ import annotations

from pathlib import Path

import numpy as np

NAMES = ["Tim", "Lily", "Ben", "Mia", "Sam", "Anna", "Max", "Sue", "Tom", "Lucy", "Jack", "Emma"]
ANIMALS = ["cat", "dog", "bird", "fish", "bunny", "frog", "bear", "duck", "mouse", "fox"]
ADJECTIVES = ["little", "happy", "sad", "big", "kind", "shy", "brave", "small", "funny", "sleepy"]
TOYS = ["ball", "kite", "doll", "car", "book", "hat", "drum", "boat", "cake", "box"]
PLACES = ["park", "garden", "forest", "house", "river", "school", "beach", "farm", "hill", "room"]
FEELINGS = ["happy", "sad", "scared", "proud", "tired", "excited", "angry", "calm"]
COLORS = ["red", "blue", "green", "yellow", "pink", "white", "brown", "shiny"]
VERBS_PAST = ["played", "ran", "jumped", "danced", "sang", "walked", "laughed", "looked"]

OPENERS = [
    "Once upon a time, there was a {adj} {animal} named {name}.",
    "One day, a {adj} {animal} named {name} went to the {place}.",
    "There was a {adj} girl named {name}. She had a {color} {toy}.",
    "There was a {adj} boy named {name}. He had a {color} {toy}.",
]
MIDDLES = [
    "{name} {verb} in the {place} with a {color} {toy}.",
    "{name} saw a {adj} {animal} near the {place}.",
    "The {animal} wanted to play with the {toy}, but it was too big.",
    "{name} felt {feeling} because the {toy} was lost.",
    "Then {name} found a {color} {toy} under a tree.",
    "The sun was warm and the {place} was very quiet.",
    "{name} and the {animal} {verb} all day long.",
    "Mom said, \"Be careful in the {place}!\"",
]
ENDINGS = [
    "In the end, {name} was very {feeling}.",
    "They became best friends and {verb} every day.",
    "{name} went home and took a long nap.",
    "From that day on, {name} always shared the {toy}.",
    "The {animal} smiled, and {name} smiled too.",
]


def _fill(rng: np.random.Generator, template: str, name: str, animal: str) -> str:
    pick = lambda xs: xs[rng.integers(len(xs))]
    return template.format(
        name=name,
        animal=animal,
        adj=pick(ADJECTIVES),
        toy=pick(TOYS),
        place=pick(PLACES),
        feeling=pick(FEELINGS),
        color=pick(COLORS),
        verb=pick(VERBS_PAST),
    )


def synthetic_stories(n: int, seed: int = 0, n_middle: tuple[int, int] = (1, 3)) -> list[str]:
    """Generate ``n`` short semi-coherent stories, deterministically from ``seed``.

    Each story is an opener, ``n_middle`` middle sentences (inclusive range)
    and an ending, with one protagonist and one animal throughout.
    """
    rng = np.random.default_rng(seed)
    stories = []
    for _ in range(n):
        name = NAMES[rng.integers(len(NAMES))]
        animal = ANIMALS[rng.integers(len(ANIMALS))]
        sentences = [_fill(rng, OPENERS[rng.integers(len(OPENERS))], name, animal)]
        for _ in range(int(rng.integers(n_middle[0], n_middle[1] + 1))):
            sentences.append(_fill(rng, MIDDLES[rng.integers(len(MIDDLES))], name, animal))
        sentences.append(_fill(rng, ENDINGS[rng.integers(len(ENDINGS))], name, animal))
        stories.append(" ".join(sentences))
    return stories


def load_text_corpus(path: str | Path, min_words: int = 2) -> list[str]:
    """One sample per nonblank line of a UTF-8 text file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [" ".join(line.split()) for line in lines if len(line.split()) >= min_words]
