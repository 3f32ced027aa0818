#!/usr/bin/env python3
"""Generate the bundled sample corpus of human-style text-to-image prompts.

Each prompt is a plain subject description followed by a comma-separated
list of enhancement keywords drawn from data/taxonomy.csv. Subjects never
contain a taxonomy keyword, so the prefix of every prompt scores zero under
the stub preference scorer. Output is deterministic for a given seed.

    python3 scripts/make_sample_corpus.py --seed 7 --out data
"""
import argparse
import csv
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

PEOPLE = ["a boy", "a girl", "an astronaut", "a knight", "a wizard", "a robot",
          "a sailor", "a farmer", "a dancer", "a monk", "a pirate", "a queen",
          "a king", "a child", "an explorer", "a scientist", "a chef",
          "a musician", "two women", "two men", "a fox", "a cat", "a dog",
          "an owl", "a dragon", "a tiger", "a whale", "a horse", "a bear",
          "a deer", "a rabbit", "a wolf", "an elephant", "a lion", "a samurai"]
ACTIONS = ["on a horse", "working in a kitchen", "reading a book",
           "walking through a forest", "standing on a hill",
           "sitting by a river", "flying over a city", "sleeping under a tree",
           "playing a violin", "riding a bicycle", "in a garden",
           "on a boat", "at a market", "in a library", "on the moon",
           "near a lighthouse", "inside a castle", "on a mountain",
           "in the rain", "at night", "in a desert", "by the sea",
           "drinking tea", "holding a lantern", "in a field of flowers"]
PLACES = ["a tropical beach with palm trees", "a quiet village in winter",
          "a castle on a cliff", "a city street at night",
          "a lighthouse by the sea", "a forest with tall trees",
          "a small house in the mountains", "a market in the morning",
          "a river running through a valley", "a harbor with sailing ships",
          "a train station in the snow", "a garden full of roses",
          "an island in the ocean", "a bridge over a canyon",
          "a temple in the jungle", "a kitchen with copper pots",
          "a library with endless shelves", "a waterfall in a cave",
          "a farm at sunset", "a space station orbiting a planet",
          "a lake surrounded by pine trees", "a street cafe in paris",
          "a greenhouse full of plants", "a windmill in a meadow"]
ADJECTIVES = ["giant", "tiny", "happy", "lonely", "ancient", "young", "wise",
              "sleepy", "brave", "curious", "friendly", "quiet", "wild",
              "small", "tall", "golden", "silver", "red", "blue", "green"]


def load_keywords(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    return {h: [r[i].strip().lower() for r in body] for i, h in enumerate(header)}


def tokens(text):
    return text.lower().replace(",", " , ").split()


def contains_phrase(toks, phrase):
    p = tokens(phrase)
    return any(toks[i:i + len(p)] == p for i in range(len(toks) - len(p) + 1))


def make_subject(rng):
    kind = rng.random()
    if kind < 0.45:
        who = rng.choice(PEOPLE)
        if rng.random() < 0.4:
            article, noun = who.split(" ", 1)
            adj = rng.choice(ADJECTIVES)
            if article in ("a", "an"):
                article = "an" if adj[0] in "aeiou" else "a"
                who = f"{article} {adj} {noun}"
        return f"{who} {rng.choice(ACTIONS)}"
    if kind < 0.8:
        return rng.choice(PLACES)
    return f"{rng.choice(PEOPLE)} {rng.choice(ACTIONS)} {rng.choice(ACTIONS[10:])}"


def make_prompt(rng, subject, keywords):
    if rng.random() < 0.06:
        return subject
    cats = list(keywords)
    n = rng.randint(1, 5)
    picked = []
    for cat in rng.sample(cats, n):
        kw = rng.choice(keywords[cat])
        if kw not in picked:
            picked.append(kw)
    if rng.random() < 0.35:
        return subject + ", by " + rng.choice(keywords["Artist"]) + ", " + ", ".join(picked)
    return subject + ", " + ", ".join(picked)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--train", type=int, default=1000)
    ap.add_argument("--eval", type=int, default=500)
    ap.add_argument("--out", type=Path, default=ROOT / "data")
    args = ap.parse_args()

    keywords = load_keywords(ROOT / "data" / "taxonomy.csv")
    all_kw = sorted({k for ks in keywords.values() for k in ks})
    rng = random.Random(args.seed)

    def subject_ok(s):
        t = tokens(s)
        return not any(contains_phrase(t, k) for k in all_kw)

    for pool in (PEOPLE, ACTIONS, PLACES, ADJECTIVES):
        for s in pool:
            assert subject_ok(s), s

    prompts = []
    fixed = ["a boy on a horse", "a tropical beach with palm trees",
             "two women working in a kitchen"]
    for s in fixed:
        prompts.append(make_prompt(rng, s, keywords))
    while len(prompts) < args.train + args.eval:
        s = make_subject(rng)
        if subject_ok(s):
            prompts.append(make_prompt(rng, s, keywords))

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "prompts_train.txt").write_text("\n".join(prompts[:args.train]) + "\n")
    (args.out / "prompts_eval.txt").write_text("\n".join(prompts[args.train:]) + "\n")


if __name__ == "__main__":
    main()
