"""Label vocabulary shared by every module."""

BACKGROUND, CYTOPLASM, NUCLEUS, PROMASTIGOTE, ADHERED, AMASTIGOTE, UNKNOWN = range(7)

CLASS_NAMES = (
    "background",
    "cytoplasm",
    "nucleus",
    "promastigote",
    "adhered",
    "amastigote",
    "unknown",
)
NUM_CLASSES = len(CLASS_NAMES)
PARASITE_CLASSES = (PROMASTIGOTE, ADHERED, AMASTIGOTE)
# classes that appear as rows of the pixel-metrics table; unknown is never scored
EVALUATED_CLASSES = tuple(range(UNKNOWN))

# Pixel share of each class in the reference micrograph corpus (percent / 100).
# The figures sum to 100.59 %; the excess equals the unknown share, i.e. the
# background figure counts stain blobs as background. The generator uses the
# foreground entries and fills the rest with background.
REFERENCE_PROFILE = {
    BACKGROUND: 0.9938,
    CYTOPLASM: 0.0041,
    NUCLEUS: 0.0016,
    PROMASTIGOTE: 0.0002,
    ADHERED: 0.0001,
    AMASTIGOTE: 0.0002,
    UNKNOWN: 0.0059,
}

# Parasite-rich profile for desk-scale training.
DENSE_PROFILE = {
    BACKGROUND: 0.62,
    CYTOPLASM: 0.165,
    NUCLEUS: 0.035,
    PROMASTIGOTE: 0.07,
    ADHERED: 0.045,
    AMASTIGOTE: 0.035,
    UNKNOWN: 0.03,
}


def class_name(c: int) -> str:
    return CLASS_NAMES[c]
