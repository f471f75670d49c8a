"""Desk-scale laboratory for adversarially trained GAN classifiers.

The package trains an image-to-image generator jointly with a dual-head
discriminator under a projected-gradient inner loop, so the composed model
(generator into classification head) is optimized against the attacks it
will face, alongside plain adversarially trained baselines, and ships the
evaluation harness: robustness curves, point-wise tables, saliency grids,
and the obfuscated-gradients battery.
"""

from .attacks import (AdversarialBatch, ClassifierView, ThreatModel, UNBOUNDED,
                      classifier_view, composite_view, fgsm_attack, pgd_attack,
                      project_linf)
from .config import (PRESETS, OptimizerSpec, TrainConfig, config_hash, load_config,
                     parse_config)
from .data import (DatasetProfile, LabeledBatch, batch_iterator, get_profile,
                   load_cifar10, load_dataset, load_mnist, load_svhn,
                   make_digits_dataset, make_toy_dataset, stratified_subset,
                   toy_profile, validate_batch)
from .errors import (AtganError, AttackError, CheckpointError, ConfigError,
                     ContractError, DataFormatError, TrainingDivergedError)
from .evalkit import (PointwiseTable, RobustnessCurve, SaliencyMap, clean_accuracy,
                      obfuscated_gradients_test, pointwise_table, robust_accuracy,
                      robustness_curve, saliency_map)
from .losses import (LossWeights, adversarial_loss, classification_loss,
                     cross_entropy, discrimination_loss, full_objectives,
                     generator_gan_loss, perceptual_loss)
from .models import (ConvClassifier, DualHeadDiscriminator, FeatureLossNetwork,
                     Generator, build_classifier, build_discriminator,
                     build_generator, build_loss_network)
from .trainer import (Checkpoint, TrainResult, apply_fracat, load_checkpoint,
                      pretrain_loss_network, restore_models, run_training,
                      save_checkpoint, train_atgan, train_classifier)

__version__ = "0.1.0"
