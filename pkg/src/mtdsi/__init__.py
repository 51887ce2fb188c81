"""Reference-free speech intelligibility prediction from phoneme posteriorgrams.

The chain is: audio mixing and masker synthesis, log-mel and amplitude
modulation features, frame posteriors, the mean temporal distance (M),
an exponential WER map, and a logistic psychometric fit that yields the
speech reception threshold (SRT).
"""
__version__ = "0.1.0"

from .audio import AudioBuffer, MixResult, mix_at_snr, read_wav, write_wav
from .errors import (
    DegenerateSignalError,
    InsufficientFramesError,
    MtdsiError,
    PipelineError,
    PosteriorValidationError,
    RankError,
    ShapeError,
    UnidentifiableFitError,
)
from .features import FeatureMatrix, amfb, extract, mfsc, splice
from .maskers import MaskerSpec, make_masker
from .mmeasure import MtdProfile, m_scalar, mtd, mtd_profile, sym_kl
from .posteriorgram import (
    Posteriorgram,
    TriphoneMap,
    group_to_monophones,
    load_posteriorgram,
    save_posteriorgram,
)
from .prediction import (
    PsychometricFit,
    SrtPrediction,
    WerMap,
    calibrate_wer_map,
    fit_psychometric,
    rmse_srt,
    srt,
    wer_from_m,
)

__all__ = [
    "AudioBuffer", "MixResult", "mix_at_snr", "read_wav", "write_wav",
    "DegenerateSignalError", "InsufficientFramesError", "MtdsiError", "PipelineError",
    "PosteriorValidationError", "RankError", "ShapeError", "UnidentifiableFitError",
    "FeatureMatrix", "amfb", "extract", "mfsc", "splice",
    "MaskerSpec", "make_masker",
    "MtdProfile", "m_scalar", "mtd", "mtd_profile", "sym_kl",
    "Posteriorgram", "TriphoneMap", "group_to_monophones", "load_posteriorgram", "save_posteriorgram",
    "PsychometricFit", "SrtPrediction", "WerMap", "calibrate_wer_map", "fit_psychometric",
    "rmse_srt", "srt", "wer_from_m",
]
