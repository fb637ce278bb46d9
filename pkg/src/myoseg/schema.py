"""Label schema and per-group sequence/label availability.

The on-disk labelmaps use one integer code per structure. Stage 1 of the
cascade sees coarse anatomy only (whole myocardium as one label), Stage 2
resolves the myocardium into healthy tissue, scar and edema. Which sequences
and labels exist depends on the acquisition group of a subject:

    G1: LGE + T2 + bSSFP, labels LV, RV, MYO, scar, edema
    G2: LGE + bSSFP,      labels LV, RV, MYO, scar
    G3: LGE only,         labels LV, MYO, scar
"""

from dataclasses import dataclass, field

SEQUENCES = ("lge", "t2", "bssfp")

# full fine-grained label order; index = canonical channel slot
FULL_LABELS = ("background", "lv", "rv", "healthy_myo", "scar", "edema")
STAGE1_LABELS = ("background", "lv", "rv", "myo")

DEFAULT_LABEL_CODES = {
    "background": 0,
    "lv": 1,
    "rv": 2,
    "healthy_myo": 3,
    "scar": 4,
    "edema": 5,
}

GROUPS = ("G1", "G2", "G3")

_GROUP_SEQUENCES = {
    "G1": ("lge", "t2", "bssfp"),
    "G2": ("lge", "bssfp"),
    "G3": ("lge",),
}
# label_mask order: (lv, rv, myo, scar, edema)
MASK_LABELS = ("lv", "rv", "myo", "scar", "edema")
_GROUP_LABELS = {
    "G1": ("lv", "rv", "myo", "scar", "edema"),
    "G2": ("lv", "rv", "myo", "scar"),
    "G3": ("lv", "myo", "scar"),
}


def group_from_sequences(present):
    """Map a set of present sequence names to a group tag.

    Raises ValueError for availability patterns outside the three groups.
    """
    present = frozenset(present)
    for group, seqs in _GROUP_SEQUENCES.items():
        if present == frozenset(seqs):
            return group
    raise ValueError(f"unknown sequence availability pattern: {sorted(present)}")


def sequence_mask(group):
    seqs = _GROUP_SEQUENCES[group]
    return tuple(s in seqs for s in SEQUENCES)


def label_mask(group):
    labels = _GROUP_LABELS[group]
    return tuple(name in labels for name in MASK_LABELS)


@dataclass(frozen=True)
class LabelSchema:
    """Integer-code mapping plus the per-stage, per-group label orderings."""

    codes: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_CODES))

    def __post_init__(self):
        missing = set(FULL_LABELS) - set(self.codes)
        if missing:
            raise ValueError(f"label schema missing codes for: {sorted(missing)}")
        values = list(self.codes.values())
        if len(set(values)) != len(values):
            raise ValueError("label codes must be unique")
        if any(int(v) != v or v < 0 for v in values):
            raise ValueError("label codes must be non-negative integers")

    def code(self, name):
        return self.codes[name]

    # ---- per-stage label lists -------------------------------------------

    def stage1_labels(self, group):
        """Stage-1 label names for a group: background + LV (+ RV) + MYO."""
        avail = _GROUP_LABELS[group]
        return tuple(n for n in STAGE1_LABELS if n == "background" or n in avail)

    def stage2_labels(self, group):
        """Stage-2 label names for a group, ordered by the full schema."""
        avail = _GROUP_LABELS[group]
        keep = {"healthy_myo" if n == "myo" else n for n in avail}
        return tuple(n for n in FULL_LABELS if n == "background" or n in keep)

    def stage_labels(self, stage, group):
        return self.stage1_labels(group) if stage == 1 else self.stage2_labels(group)

    # ---- code mappings ----------------------------------------------------

    def stage1_code(self, name):
        """Codes used in derived Stage-1 labelmaps (own code space 0..3)."""
        return STAGE1_LABELS.index(name)

    def stage2_code(self, name):
        return self.codes[name]

    def stage_codes(self, stage, group):
        """On-disk integer code per channel for a (stage, group) head."""
        names = self.stage_labels(stage, group)
        if stage == 1:
            return tuple(self.stage1_code(n) for n in names)
        return tuple(self.codes[n] for n in names)

    def myo_union_codes(self):
        """Codes whose union forms the whole myocardium for Stage-1 GT."""
        return (self.codes["healthy_myo"], self.codes["scar"], self.codes["edema"])

    def full_slot(self, name):
        """Canonical channel slot of a label in the full 6-label layout.

        Stage-1's whole-myocardium label occupies the healthy-myocardium slot.
        """
        if name == "myo":
            name = "healthy_myo"
        return FULL_LABELS.index(name)
