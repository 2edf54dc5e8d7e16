"""Desk-scale siamese change detection: feature exchange and AD interaction
layers, flow dual-alignment fusion, a from-scratch float64 autodiff core, and
a training/evaluation CLI."""

from .tensor import Tensor, Parameters, grad_check
from .interact import (ExchangeMask, make_channel_mask, make_spatial_mask,
                       exchange, ad_interact, identity_interact)
from .fusion import flow_net, fdaf_fuse, concat_fuse
from .model import (ChangerModel, ModelConfig, config_for_variant, mac_count,
                    save_checkpoint, load_checkpoint)
from .train import (Sample, TrainConfig, EvalReport, ce_loss, adamw_init,
                    adamw_step, poly_lr, augment, synth_generate, evaluate,
                    train_loop)

__version__ = "0.1.0"
