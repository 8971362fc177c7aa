# app/core/constants.py

from __future__ import annotations

# ---- Sentinel tokens (id order is fixed: sentinels first) ----
TOKEN_SUB = "[SUB]"
TOKEN_BOX_OPEN = "[BOX]"
TOKEN_BOX_CLOSE = "[/BOX]"
TOKEN_AT = "[@]"
TOKEN_SEP = "[SEP]"
TOKEN_PAD = "[PAD]"
TOKEN_UNK = "[UNK]"

SENTINEL_TOKENS = (
    TOKEN_SUB,
    TOKEN_BOX_OPEN,
    TOKEN_BOX_CLOSE,
    TOKEN_AT,
    TOKEN_SEP,
    TOKEN_PAD,
    TOKEN_UNK,
)

SUB_ID = SENTINEL_TOKENS.index(TOKEN_SUB)
BOX_OPEN_ID = SENTINEL_TOKENS.index(TOKEN_BOX_OPEN)
BOX_CLOSE_ID = SENTINEL_TOKENS.index(TOKEN_BOX_CLOSE)
AT_ID = SENTINEL_TOKENS.index(TOKEN_AT)
SEP_ID = SENTINEL_TOKENS.index(TOKEN_SEP)
PAD_ID = SENTINEL_TOKENS.index(TOKEN_PAD)
UNK_ID = SENTINEL_TOKENS.index(TOKEN_UNK)

NUM_SENTINELS = len(SENTINEL_TOKENS)

# Position tokens render as <pos_17>; text terms may never look like this.
POSITION_TOKEN_FORMAT = "<pos_{}>"

# ---- Synthetic world: geometric predicates ----
REL_ABOVE = "above"
REL_BELOW = "below"
REL_LEFT_OF = "left of"
REL_RIGHT_OF = "right of"
REL_INSIDE = "inside"
REL_OVERLAPPING = "overlapping"

SPATIAL_RELATIONS = (
    REL_ABOVE,
    REL_BELOW,
    REL_LEFT_OF,
    REL_RIGHT_OF,
    REL_INSIDE,
    REL_OVERLAPPING,
)

# ---- Record kinds / sources ----
IMAGE_KIND_FILE = "file"
IMAGE_KIND_SYNTHETIC = "synthetic"

SOURCE_SYNTHETIC_GROUNDED = "synthetic-grounded"
SOURCE_SYNTHETIC_CAPTION = "synthetic-caption"
SOURCE_IN_DOMAIN = "in-domain"

# ---- Benchmark split names ----
SPLIT_BASE_TRAIN = "base_train"
SPLIT_TEXT_AUG_TRAIN = "text_aug_train"
SPLIT_TEST_A = "test_a"
SPLIT_TEST_B = "test_b"
SPLIT_FULL_TEST = "full_test"

TRAIN_SPLITS = {
    "base": SPLIT_BASE_TRAIN,
    "text_aug": SPLIT_TEXT_AUG_TRAIN,
}

TEST_SPLITS = (SPLIT_TEST_A, SPLIT_TEST_B, SPLIT_FULL_TEST)

AUGMENT_EXTERNAL = "external"
AUGMENT_IN_DOMAIN = "in_domain"

# ---- Decoding strategies ----
STRATEGY_TWO_STEP = "two_step"
STRATEGY_SINGLE_PASS = "single_pass"

DECODING_STRATEGIES = {STRATEGY_TWO_STEP, STRATEGY_SINGLE_PASS}

# Marks a sample whose decoder produced no finished hypothesis.
EMPTY_PREDICTION_RANK = -1

# ---- CLI exit codes / diagnostic categories ----
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CATEGORY_CONFIG = "config"
CATEGORY_VALIDATION = "validation"
CATEGORY_NUMERIC = "numeric"
CATEGORY_GENERATION = "generation"
CATEGORY_STORAGE = "storage"

SPLIT_NAMES = (SPLIT_BASE_TRAIN, SPLIT_TEXT_AUG_TRAIN, *TEST_SPLITS)

# ---- Lexicon file sections ----
LEXICON_SECTIONS = ("verbs", "prepositions", "ignorable", "nouns", "copulas", "modifiers")
REQUIRED_LEXICON_SECTIONS = ("verbs", "prepositions", "ignorable", "nouns")
