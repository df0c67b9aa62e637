"""lesionlab: lesion-size reweighted cross entropy, studied end to end at
desk scale — weight schemes, loss gradients, synthetic phantoms, a small
exactly-differentiated segmenter, and detection/segmentation operating-point
curves."""

from .grid import Dims, Mask, Volume, VolumeFormatError, linear_index, read_volume, write_volume
from .lesions import LabelMap, LesionRecord, SizeBin, label_components, lesion_table, size_bin
from .losses import LossSpec, LossResult, loss_value_grad, loss_value_from_probs, sigmoid
from .metrics import (
    CurveRow,
    DetectionCounts,
    OperatingReport,
    Rates,
    VoxelCounts,
    match_lesions,
    operating_report,
    rates,
    sweep_curves,
    voxel_counts,
)
from .model import (
    Adam,
    MlpParams,
    NumericalAbort,
    TrainConfig,
    TrainResult,
    backward,
    extract_features,
    forward,
    predict_probs,
    train,
)
from .phantom import PhantomCase, PhantomGenerationError, PhantomSpec, generate, generate_dataset, splitmix64
from .weighting import (
    WeightMap,
    WeightParams,
    WeightScheme,
    inverse_voxel_weight,
    lsr_lesion_weight,
    lsr_voxel_weight,
    weight_map,
)

__version__ = "0.1.0"
