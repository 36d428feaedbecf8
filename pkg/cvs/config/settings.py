# CvS Configuration

import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Paths
OUTPUT_ROOT = os.getenv("CVS_OUTPUT_ROOT", "runs")
DATA_ROOT = os.getenv("CVS_DATA_ROOT", "data")
RESNET101_WEIGHTS = os.getenv("CVS_RESNET101_WEIGHTS") or None
DEFAULT_DEVICE = os.getenv("CVS_DEVICE", "cpu")  # or "cuda"
LOG_LEVEL = os.getenv("CVS_LOG_LEVEL", "INFO")

# Artifact format
FORMAT_VERSION = "cvs-artifacts/1"

# Methods
METHODS = ["cvs", "classification", "multitask", "segmentation-only"]
SEGMENTATION_METHODS = {"cvs", "segmentation-only", "multitask"}
BACKBONES = ["wide-resnet", "resnet101"]

# Optimizer defaults (SGD)
DEFAULT_LR = 0.1
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0005
DEFAULT_LR_SCHEDULE = "cosine"  # or "constant"
DEFAULT_MTL_LAMBDA = 1.0
DEFAULT_SEED = 0

# Epoch budget
EPOCHS_FULL_DATA = 200
EPOCHS_SMALL_DATA = 600  # used when M <= SMALL_DATA_M
SMALL_DATA_M = 100

# Batch size ladder: (max training samples, batch size)
BATCH_SIZE_LADDER = [(50, 8), (200, 16), (2000, 32)]
LARGE_BATCH_SIZE = 128
ALLOWED_BATCH_SIZES = (8, 16, 32, 128)

# Validation split
VALIDATION_FRACTION = 0.1
VALIDATION_MIN_SUBSET = 50  # M * P threshold

# Network defaults
WRN_DEPTH = 28
WRN_WIDTH = 10
DEFAULT_DROPOUT = 0.3
RESNET101_INPUT_SIZE = 128
HRF_INPUT_SIZE = 512
ASPP_RATES = (12, 24, 36)
ASPP_CHANNELS = 256

# Label synthesis
BINARIZE_THRESHOLD = 0.0
KEEP_MANUAL_MASKS = True

# Built-in datasets: num_classes, (H, W, C), train size, test size
BUILTIN_DATASETS = {
    "mnist": {"num_classes": 10, "image_shape": (28, 28, 1), "train": 60000, "test": 10000},
    "cifar10": {"num_classes": 10, "image_shape": (32, 32, 3), "train": 50000, "test": 10000},
    "cifar100": {"num_classes": 100, "image_shape": (32, 32, 3), "train": 50000, "test": 10000},
    "synthetic-shapes": {"num_classes": 3, "image_shape": (32, 32, 3), "train": 30, "test": 30},
}

# Augmentation defaults
ROTATE_MAX_DEGREES = 15.0
SHIFT_MAX_FRAC = 0.1
ZOOM_RANGE = (0.9, 1.1)
NOISE_SIGMA = 0.05
COLOR_STRENGTH = 0.4
FLIP_PROB = 0.5
CROP_SCALE_RANGE = (0.8, 1.0)

# Default policies per (dataset, method family); "baseline" covers
# classification and multitask
AUGMENTATION_POLICIES = {
    ("mnist", "cvs"): [
        {"kind": "rotate", "max_degrees": ROTATE_MAX_DEGREES},
        {"kind": "shift_zoom", "max_shift_frac": SHIFT_MAX_FRAC, "zoom_range": list(ZOOM_RANGE)},
        {"kind": "gaussian_noise", "sigma": NOISE_SIGMA},
    ],
    ("cifar10", "cvs"): [
        {"kind": "rotate", "max_degrees": ROTATE_MAX_DEGREES},
        {"kind": "color_distort", "strength": COLOR_STRENGTH},
        {"kind": "horizontal_flip", "prob": FLIP_PROB},
    ],
    ("cifar100", "cvs"): [
        {"kind": "color_distort", "strength": COLOR_STRENGTH},
        {"kind": "shift_zoom", "max_shift_frac": SHIFT_MAX_FRAC, "zoom_range": list(ZOOM_RANGE)},
        {"kind": "horizontal_flip", "prob": FLIP_PROB},
    ],
    ("synthetic-shapes", "cvs"): [
        {"kind": "rotate", "max_degrees": ROTATE_MAX_DEGREES},
        {"kind": "horizontal_flip", "prob": FLIP_PROB},
    ],
    ("default", "baseline"): [
        {"kind": "crop_resize", "scale_range": list(CROP_SCALE_RANGE)},
        {"kind": "horizontal_flip", "prob": FLIP_PROB},
    ],
    ("fundus", "any"): [
        {"kind": "horizontal_flip", "prob": FLIP_PROB},
        {"kind": "rotate", "max_degrees": ROTATE_MAX_DEGREES},
    ],
}

# Annotation rates in seconds per image
ANNOTATION_RATES = {
    "cifar10": {"t_class": 3.5, "t_seg": 29.52},
    # segmentation time carried over from CIFAR-10 (masks propagated from there)
    "cifar100": {"t_class": 8.5, "t_seg": 29.52},
    # Assumed, not measured: t_class borrowed from CIFAR-10, binarized masks cost nothing
    "mnist": {"t_class": 3.5, "t_seg": 0.0},
    # Assumed, not measured: placeholder CIFAR-10 rates for the toy dataset
    "synthetic-shapes": {"t_class": 3.5, "t_seg": 29.52},
}

# Output file names
CONFIG_FILENAME = "config.json"
METRICS_FILENAME = "metrics.tsv"
REPORT_FILENAME = "eval_report.json"
RESULTS_FILENAME = "results.tsv"
RESULTS_MEAN_FILENAME = "results_mean.tsv"
COST_FILENAME = "cost_curve.tsv"
PROPAGATION_REPORT_FILENAME = "propagation_report.txt"
MANIFEST_FILENAME = "manifest.tsv"
LOCK_FILENAME = ".lock"
