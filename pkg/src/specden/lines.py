"""Built-in X-ray line table for the elements of the CMOS phantom.

Line energies (keV) are the standard tabulated values (Bearden).  The relative
weights inside one element are rounded line-intensity ratios and the element
``yield`` folds together ionisation cross-section, fluorescence yield and
detector efficiency.  Both are model configuration rather than physics.
"""

# element: (atomic number, atomic weight)
ELEMENTS = {
    "N": (7, 14.007),
    "O": (8, 15.999),
    "Al": (13, 26.982),
    "Si": (14, 28.085),
    "Ti": (22, 47.867),
    "Hf": (72, 178.49),
    "Ta": (73, 180.95),
}

# element: [(line label, energy keV, relative weight within element)]
LINES = {
    "N": [("Ka", 0.3924, 1.0)],
    "O": [("Ka", 0.5249, 1.0)],
    "Al": [("Ka", 1.4867, 1.0), ("Kb", 1.5575, 0.03)],
    "Si": [("Ka", 1.7398, 1.0), ("Kb", 1.8359, 0.05)],
    "Ti": [("La", 0.4522, 0.10), ("Ka", 4.5109, 1.0), ("Kb", 4.9318, 0.13)],
    "Hf": [("Ma", 1.6446, 0.6), ("La", 7.8990, 1.0), ("Lb", 9.0228, 0.55), ("Lg", 10.5156, 0.08)],
    "Ta": [("Ma", 1.7100, 0.6), ("La", 8.1461, 1.0), ("Lb", 9.3431, 0.55), ("Lg", 10.8952, 0.08)],
}

YIELD = {
    "N": 0.15,
    "O": 0.30,
    "Al": 0.85,
    "Si": 1.0,
    "Ti": 1.2,
    "Hf": 0.9,
    "Ta": 0.9,
}


def strongest_line(element: str) -> tuple[str, float]:
    label, energy, _ = max(LINES[element], key=lambda t: t[2])
    return label, energy
