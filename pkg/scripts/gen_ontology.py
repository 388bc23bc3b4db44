"""Regenerate the bundled ontology file (src/metapol/data/multiwoz_like.ont).

Entity rows are drawn uniformly per slot with a fixed seed so the file is
reproducible. Run from the repository root:

    python scripts/gen_ontology.py
"""

import json
from pathlib import Path

import numpy as np

SLOTS = {
    "area": ["centre", "north", "south", "east", "west"],
    "price": ["cheap", "moderate", "expensive"],
    "type": ["museum", "park", "theatre", "cinema", "gallery", "pool"],
    "food": ["british", "italian", "indian", "chinese", "thai", "french", "turkish", "korean"],
    "name": ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa"],
    "phone": [f"phone-{i}" for i in range(10)],
    "address": [f"addr-{i}" for i in range(10)],
    "day": ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"],
    "time": ["08:00", "10:00", "12:00", "14:00", "16:00", "18:00", "20:00", "22:00"],
    "people": ["1", "2", "3", "4", "5", "6"],
    "departure": ["airport", "station-a", "station-b", "square", "bridge", "harbour"],
    "destination": ["airport", "station-a", "station-b", "square", "bridge", "harbour"],
    "stars": ["1", "2", "3", "4", "5"],
    "department": ["cardiology", "neurology", "oncology", "pediatrics", "surgery"],
    "cartype": ["sedan", "van", "coupe", "wagon"],
}

DOMAINS = [
    ("attraction", ["area", "type", "price", "name", "phone", "address"], ["area", "type"], False),
    ("restaurant", ["area", "food", "price", "name", "phone", "address", "day", "time", "people"],
     ["area", "food"], True),
    ("taxi", ["departure", "destination", "time", "cartype", "phone"], ["departure", "destination"], False),
    ("hospital", ["department", "name", "phone", "address"], ["department"], False),
    ("hotel", ["area", "price", "stars", "name", "phone", "address", "day", "people"], ["area", "price"], True),
    ("train", ["departure", "destination", "day", "time", "price", "people"],
     ["departure", "destination", "day"], True),
    ("police", ["name", "phone", "address"], [], False),
]

COMPOSITIONS = [
    ["attraction"], ["restaurant"], ["taxi"], ["hospital"], ["hotel"], ["train"], ["police"],
    ["attraction", "restaurant"], ["attraction", "taxi"], ["restaurant", "taxi"], ["taxi", "hospital"],
    ["attraction", "hotel"], ["restaurant", "hotel"], ["taxi", "hotel"],
    ["attraction", "train"], ["restaurant", "train"], ["taxi", "train"], ["hotel", "train"],
    ["attraction", "restaurant", "taxi"],
    ["attraction", "restaurant", "hotel"], ["attraction", "taxi", "hotel"], ["restaurant", "taxi", "hotel"],
    ["attraction", "restaurant", "train"], ["restaurant", "taxi", "train"], ["restaurant", "hotel", "train"],
]

ENTITIES_PER_DOMAIN = 32
SEED = 20240811


def main() -> None:
    rng = np.random.default_rng(SEED)
    entities = {}
    for name, slots, _, _ in DOMAINS:
        rows = []
        for _ in range(ENTITIES_PER_DOMAIN):
            rows.append({s: SLOTS[s][int(rng.integers(len(SLOTS[s])))] for s in slots})
        entities[name] = rows

    doc = {
        "format": "metapol-ontology",
        "version": 1,
        "acts": [
            {"name": "request", "takes_slot": True},
            {"name": "inform", "takes_slot": True},
            {"name": "book", "bookable_only": True},
            {"name": "offer-booked", "bookable_only": True},
            {"name": "no-offer"},
            {"name": "bye", "global": True},
        ],
        "slots": [{"name": n, "values": v} for n, v in SLOTS.items()],
        "domains": [
            {"name": n, "slots": s, "essential": e, "bookable": b} for n, s, e, b in DOMAINS
        ],
        "compositions": COMPOSITIONS,
        "entities": entities,
    }
    out = Path(__file__).resolve().parent.parent / "src" / "metapol" / "data" / "multiwoz_like.ont"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
