"""The 17 footwear pattern descriptor classes."""

CODES = (
    "D01", "D01-01", "D01-02", "D02", "D02-01", "D03", "D04", "D05", "D06",
    "D07", "D08", "D09", "D10", "D11", "D12", "D13", "D14",
)

NAMES = {
    "D01": "Bar",
    "D01-01": "Wavy",
    "D01-02": "Curved-wavy",
    "D02": "Circular",
    "D02-01": "Target",
    "D03": "3 sided",
    "D04": "4 sided",
    "D05": "5 sided",
    "D06": "6 sided",
    "D07": "Complex",
    "D08": "Zigzag",
    "D09": "Text",
    "D10": "Logo",
    "D11": "Lattice",
    "D12": "Textured",
    "D13": "Hollow",
    "D14": "Plain",
}

# subcategory -> parent category
PARENT = {"D01-01": "D01", "D01-02": "D01", "D02-01": "D02"}

N_CLASSES = len(CODES)
INDEX = {code: i for i, code in enumerate(CODES)}


def close_labels(codes):
    """Add implied parent categories; return codes in canonical order."""
    present = set(codes)
    for code in list(present):
        if code not in INDEX:
            raise KeyError(f"unknown descriptor code {code!r}")
        if code in PARENT:
            present.add(PARENT[code])
    return [c for c in CODES if c in present]


def to_vector(codes):
    import numpy as np

    vec = np.zeros(N_CLASSES)
    for code in close_labels(codes):
        vec[INDEX[code]] = 1.0
    return vec
