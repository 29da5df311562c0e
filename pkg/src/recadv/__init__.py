"""Toolkit for training and evaluating recoverable adversarial examples.

A perturbation generator, a pooling-based dimension reducer, a
discriminator, and a recovery network are trained jointly against a
frozen classifier so that the resulting adversarial images fool the
classifier yet can be undone, near losslessly, by the paired recovery
net. Evaluation covers attack strength, recovery quality (L2 / PSNR /
error rates), robustness to common image disturbances, and cross-model
transfer.
"""

from .attacks import AttackConfig, fgsm, pgd, transfer_matrix
from .data import Dataset, batches, dequantize_8bit, load_mnist, quantize_8bit
from .losses import AdvLossMode, LossWeights, RecoverLossWeights
from .models import (ClassifierSpec, Discriminator, GeneratorConfig,
                     PerturbationNet, RecoverConfig, build_classifier,
                     build_model_family)
from .reducer import (DimensionReducer, ReducerConfig, delta_pair,
                      dimension_reduce, downsample, lemma_check, upsample)
from .train import (JointBundle, TrainConfig, desk_profile, load_checkpoint,
                    load_classifier, load_joint, lr_schedule, save_checkpoint,
                    save_classifier, save_joint, set_seed, train_classifier,
                    train_joint)

__version__ = "0.1.0"
