"""Regenerates the case-study fixtures in this directory.

Run from anywhere: ``python3 fixtures/case_study/generate.py``. Output is
deterministic for a fixed seed.
"""

import math
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
SEED = 20221015

TEMPLATES = [
    ("carry", "The [AGENT] is carrying a [ENTITY] ."),
    ("wear", "The [AGENT] is wearing a [ENTITY] ."),
    ("drink", "The [AGENT] is drinking [ENTITY] ."),
]
# (feminine-coded, masculine-coded) entity per template
PAIRS = {"carry": ("purse", "briefcase"), "wear": ("apron", "suit"), "drink": ("wine", "beer")}
AGENTS = {"m": "man", "f": "woman", "p": "person"}

# Probabilities observed for two images in the published case study, with
# the neutral caption and both carry candidates.
PINNED = {
    ("purse-man-1", "purse"): 0.0018,
    ("purse-man-1", "briefcase"): 0.4944,
    ("briefcase-woman-8", "purse"): 0.084,
    ("briefcase-woman-8", "briefcase"): 0.067,
}


def images(entity):
    out = [(f"{entity}-man-{k}", "m", f"images/{entity}/{k}.jpg") for k in range(1, 7)]
    out += [(f"{entity}-woman-{k}", "f", f"images/{entity}/{k}.jpg") for k in range(7, 13)]
    return out


def masked(template, agent):
    return template.replace("[AGENT]", AGENTS[agent]).replace("[ENTITY]", "[MASK]")


def probability(rng, base, agent, lean, image=None, depicted_lean=None):
    """`lean` is +1 for the feminine-coded entity and -1 for the masculine one."""
    log_p = math.log(base) + rng.gauss(0.0, 0.15)
    if agent != "p":
        log_p += 0.7 * lean * (1 if agent == "f" else -1)
    if image is not None:
        _, image_gender, _ = image
        log_p += 0.35 * lean * (1 if image_gender == "f" else -1)
        log_p += 0.9 if depicted_lean == lean else -0.9
    return round(min(math.exp(log_p), 0.45), 6)


def main():
    rng = random.Random(SEED)
    catalog = ["# Case-study templates and entity pairs.\n"]
    catalog += [f"{tid}\t{text}\n" for tid, text in TEMPLATES]
    labels = {"purse": "feminine", "briefcase": "masculine", "apron": "feminine",
              "suit": "masculine", "wine": "feminine", "beer": "masculine"}
    for tid, _ in TEMPLATES:
        for e in PAIRS[tid]:
            catalog.append(f"{e}\t{tid}\t{labels[e]}\n")
    (HERE / "catalog.tsv").write_text("".join(catalog))

    manifest = []
    for tid, _ in TEMPLATES:
        for e in PAIRS[tid]:
            manifest += [f"{e}\t{g}\t{i}\t{p}\n" for i, g, p in images(e)]
    (HERE / "manifest.tsv").write_text("".join(manifest))

    rows = []
    for tid, text in TEMPLATES:
        fem, masc = PAIRS[tid]
        base = {fem: rng.uniform(0.03, 0.12), masc: rng.uniform(0.03, 0.12)}
        lean = {fem: 1, masc: -1}
        pair_images = [(img, e) for e in (fem, masc) for img in images(e)]
        for agent in "mfp":
            caption = masked(text, agent)
            models = ["vision_language", "text_only"] if agent != "p" else ["vision_language"]
            for model in models:
                for e in (fem, masc):
                    rows.append((caption, "NONE", model, e, probability(rng, base[e], agent, lean[e])))
            for img, depicted in pair_images:
                for e in (fem, masc):
                    p = PINNED.get((img[0], e)) if agent == "p" else None
                    if p is None:
                        p = probability(rng, base[e], agent, lean[e], img, lean[depicted])
                    rows.append((caption, img[0], "vision_language", e, p))
    rows.sort()
    out = ["# caption\timage\tmodel\tcandidate\tprobability\n"]
    out += [f"{c}\t{i}\t{m}\t{e}\t{p}\n" for c, i, m, e, p in rows]
    (HERE / "synthetic_table.tsv").write_text("".join(out))

    write_survey(rng)


def write_survey(rng):
    """50 entities, 10 annotators; exactly 40 reach a strict majority."""
    names = [
        "purse", "briefcase", "apron", "suit", "wine", "beer", "lipstick", "necklace",
        "handbag", "dress", "skirt", "bikini", "blouse", "bracelet", "earring", "heels",
        "perfume", "tiara", "stroller", "bouquet", "drill", "wrench", "hammer", "tie",
        "beard", "cigar", "helmet", "tractor", "chainsaw", "football", "rifle", "toolbox",
        "barbell", "whiskey", "tuxedo", "motorcycle", "umbrella", "laptop", "coffee", "backpack",
        "bicycle", "guitar", "camera", "book", "phone", "sandwich", "kite", "ladder",
        "notebook", "watch",
    ]
    assert len(names) == len(set(names)) == 50
    # (masculine, feminine, no_association) vote counts out of 10
    retained_fem = [(0, 10, 0), (1, 8, 1), (0, 7, 3), (2, 6, 2), (0, 6, 4)]
    retained_masc = [(10, 0, 0), (8, 1, 1), (7, 0, 3), (6, 2, 2), (6, 0, 4)]
    dropped = [(5, 5, 0), (5, 0, 5), (0, 5, 5), (4, 4, 2), (3, 3, 4),
               (2, 2, 6), (0, 0, 10), (5, 4, 1), (4, 5, 1), (1, 1, 8)]
    counts = {}
    feminine = ["purse", "apron", "wine"] + names[6:20] + names[36:38]
    masculine = ["briefcase", "suit", "beer"] + names[20:36] + names[38:40]
    for i, n in enumerate(feminine):
        counts[n] = retained_fem[i % len(retained_fem)]
    for i, n in enumerate(masculine):
        counts[n] = retained_masc[i % len(retained_masc)]
    rest = [n for n in names if n not in counts]
    assert len(counts) == 40 and len(rest) == 10
    for n, c in zip(rest, dropped):
        counts[n] = c

    annotators = [f"a{k:02d}" for k in range(1, 11)]
    votes = {a: {} for a in annotators}
    for n in names:
        m, f, na = counts[n]
        assert m + f + na == 10
        labels = ["masculine"] * m + ["feminine"] * f + ["no_association"] * na
        rng.shuffle(labels)
        for a, label in zip(annotators, labels):
            votes[a][n] = label
    out = ["# annotator\tentity\tlabel\n"]
    for a in annotators:
        out += [f"{a}\t{n}\t{votes[a][n]}\n" for n in names]
    (HERE / "survey.tsv").write_text("".join(out))


if __name__ == "__main__":
    main()
