"""Joint speech recognition and emotion recognition with acoustic-linguistic fusion."""

from .audio import (
    AudioBuffer,
    MelConfig,
    MixSpec,
    load_wav,
    log_mel,
    mix_at_snr,
    rms,
    save_wav,
    speed_perturb,
)
from .ctc import VOCAB, LogitLattice, Vocab, ctc_greedy_decode, ctc_loss
from .model import EMOTIONS, ModelDims, SpeechModel, load_checkpoint, save_checkpoint
from .training import JointLossConfig, TrainConfig, fit, grad_check, joint_loss

__version__ = "0.1.0"
