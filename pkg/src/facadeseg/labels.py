"""Label values and class vocabularies."""

NEG, UNK, POS, EDG = 0, 1, 2, 3
LABEL_NAMES = ("NEG", "UNK", "POS", "EDG")
NUM_LABELS = 4

CMP_CLASSES = (
    "facade",
    "molding",
    "cornice",
    "pillar",
    "window",
    "door",
    "sill",
    "blind",
    "balcony",
    "shop",
    "deco",
)
# extra outputs used when refining on ECP-style data
ECP_EXTRA_CLASSES = ("sky", "roof", "chimney", "wall")
ECP_CLASSES = CMP_CLASSES + ECP_EXTRA_CLASSES

# single-softmax baseline predicts disjoint labels, background included
CMP_JOINT_LABELS = ("background",) + CMP_CLASSES

# painter's order for single-label ECP compositing: later entries win
ECP_COMPOSITE_ORDER = ("wall", "roof", "sky", "shop", "balcony", "window", "door", "chimney")
