#!/usr/bin/env python3
"""Writes the bundled 2,000-example single-sentence sentiment TSV.

Sentences are built from templates over small word lists. About a quarter of
them carry a negation ("not", "never") that flips the polarity of the
adjective, so the label depends on word order and not only on word identity.
"""
import argparse
import random

SUBJECTS = ["the movie", "this film", "the plot", "the acting", "the soundtrack", "the ending",
            "the script", "the director's work", "the cast", "the story", "the dialogue", "the pacing",
            "this show", "the sequel", "the camera work", "the finale"]
POSITIVE = ["great", "wonderful", "brilliant", "charming", "moving", "delightful", "superb", "clever",
            "beautiful", "gripping", "funny", "heartfelt", "fresh", "stunning", "memorable", "enjoyable"]
NEGATIVE = ["terrible", "boring", "awful", "dull", "clumsy", "predictable", "tedious", "weak",
            "bland", "messy", "forgettable", "painful", "lifeless", "shallow", "annoying", "tiresome"]
ADVERBS = ["really", "truly", "quite", "very", "rather", "incredibly", "surprisingly", "somewhat", ""]
FILLERS = ["", "honestly ,", "in my opinion ,", "overall ,", "to be fair ,", "i think", "frankly ,"]
TAILS = ["", ".", "!", ", and i would say so again .", ", as expected .", ", from start to finish ."]
NEGATIONS = ["not", "never"]
VERBS = ["was", "is", "felt", "seemed"]


def sentence(rng):
    label = rng.randint(0, 1)
    negate = rng.random() < 0.25
    polarity = label if not negate else 1 - label
    adj = rng.choice(POSITIVE if polarity == 1 else NEGATIVE)
    words = [rng.choice(FILLERS), rng.choice(SUBJECTS), rng.choice(VERBS)]
    if negate:
        words.append(rng.choice(NEGATIONS))
    words += [rng.choice(ADVERBS), adj, rng.choice(TAILS)]
    text = " ".join(w for w in words if w)
    return text, label


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/sentiment_2k.tsv")
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20220301)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("sentence\tlabel\n")
        for _ in range(args.count):
            text, label = sentence(rng)
            f.write(f"{text}\t{label}\n")


if __name__ == "__main__":
    main()
