"""Regenerates assets/corpus.txt: a synthetic tiny-stories corpus.

The text is produced from a fixed template grammar with a fixed seed, so the
bundled corpus is reproducible and free of third-party copyright.
"""
import random

NAMES = ["Tom", "Mia", "Ben", "Lily", "Sam", "Anna", "Max", "Zoe", "Leo", "Ella"]
ANIMALS = ["cat", "dog", "bird", "fox", "rabbit", "bear", "duck", "frog"]
ADJS = ["little", "happy", "small", "big", "red", "kind", "brave", "shy", "old", "funny"]
PLACES = ["park", "garden", "forest", "house", "river", "hill", "town", "field"]
OBJECTS = ["ball", "box", "hat", "kite", "cake", "book", "toy", "cup", "stick", "flower"]
VERBS = ["play", "run", "jump", "sing", "read", "swim", "draw", "dance"]
FEELINGS = ["happy", "sad", "scared", "proud", "tired", "excited"]
FRIENDS = ["mom", "dad", "friend", "sister", "brother", "teacher"]

def story(rng):
    n = rng.choice(NAMES)
    a = rng.choice(ANIMALS)
    adj = rng.choice(ADJS)
    p = rng.choice(PLACES)
    p2 = rng.choice(PLACES)
    o = rng.choice(OBJECTS)
    v = rng.choice(VERBS)
    f = rng.choice(FEELINGS)
    fr = rng.choice(FRIENDS)
    oadj = rng.choice(ADJS)
    lines = []
    lines.append(rng.choice([
        f"Once upon a time, there was a {adj} {a} named {n}.",
        f"One day, a {adj} {a} named {n} went to the {p}.",
        f"There was a {adj} {a}. The {a} was called {n}.",
    ]))
    lines.append(rng.choice([
        f"{n} liked to {v} in the {p}.",
        f"{n} loved to {v} every day.",
        f"Every morning, {n} would {v} near the {p}.",
    ]))
    lines.append(rng.choice([
        f"One day, {n} found a {oadj} {o} near the {p2}.",
        f"In the {p2}, {n} saw a {oadj} {o}.",
        f"{n} looked for a {o} but could not find it.",
    ]))
    lines.append(rng.choice([
        f"{n} was very {f}.",
        f"{n} felt {f} and wanted to tell {n}'s {fr}.",
        f"The {o} made {n} feel {f}.",
    ]))
    lines.append(rng.choice([
        f"{n} ran home to show the {o} to {n}'s {fr}.",
        f"{n}'s {fr} said, \"What a nice {o}!\"",
        f"{n} and {n}'s {fr} played with the {o} all day.",
    ]))
    lines.append(rng.choice([
        f"At the end of the day, {n} went to sleep. {n} was happy.",
        f"From that day on, {n} always took the {o} to the {p}.",
        f"The end.",
    ]))
    return " ".join(lines)

def main():
    rng = random.Random(20240601)
    out = []
    size = 0
    while size < 1_000_000:
        s = story(rng)
        out.append(s)
        size += len(s) + 1
    with open("corpus.txt", "w") as fh:
        fh.write("\n".join(out) + "\n")

if __name__ == "__main__":
    main()
