"""
Configuration constants for the volseg segmentation toolkit.
Values can be overridden with environment variables.
"""

import os

# Storage locations
DATA_DIR = os.environ.get("VOLSEG_DATA_DIR", "data")
REGISTRY_FILE = os.path.join(DATA_DIR, "runs.sqlite")
MANIFEST_NAME = "manifest.json"

# Numerics
PRECISION = os.environ.get("VOLSEG_PRECISION", "float64")

# Logging
LOG_LEVEL = os.environ.get("VOLSEG_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Volume defaults (isotropic 0.625 mm voxels)
DEFAULT_SPACING = 0.625
DEFAULT_VOLUME_SHAPE = (64, 64, 32)
DEFAULT_CROP_SHAPE = (32, 32, 16)

# Loss defaults
DEFAULT_DFB_K = 5
DEFAULT_EPSILON = 1e-5
CE_CLAMP = 1e-7
