from .schema import validate
from .exceptions import Invalid, DimensionMismatch, ParseError, CorruptFile, VersionMismatch, NumericFailure

from .validations import registered_functions
from .transformations import registered_transformation

from .extras import protected

from .data import SequenceBatch, KinematicConfig, gen_kinematic, gen_ar, gen_two_regime, load_csv, save_csv
from .flow import (FlowStack, StandardNormal, flow_log_prob, flow_sample, inverse_transform, forward_transform,
                   closed_form_linear_flow)
from .slvm import SlvmModel, elbo, iw_log_likelihood, closed_form_elbo
from .latent_flow import LatentFlow, latent_prior_log_prob, latent_prior_sample
from .metrics import temporal_correlation, multi_information_gaussian, nll_normalize, generalization_gap
from .models import build_model, parameter_count
from .trainer import train, evaluate, checkpoint_save, checkpoint_load

__all__ = ['validate', 'protected', 'Invalid', 'DimensionMismatch', 'ParseError', 'CorruptFile', 'VersionMismatch',
           'NumericFailure', 'registered_functions', 'registered_transformation',
           'SequenceBatch', 'KinematicConfig', 'gen_kinematic', 'gen_ar', 'gen_two_regime', 'load_csv', 'save_csv',
           'FlowStack', 'StandardNormal', 'flow_log_prob', 'flow_sample', 'inverse_transform', 'forward_transform',
           'closed_form_linear_flow',
           'SlvmModel', 'elbo', 'iw_log_likelihood', 'closed_form_elbo',
           'LatentFlow', 'latent_prior_log_prob', 'latent_prior_sample',
           'temporal_correlation', 'multi_information_gaussian', 'nll_normalize', 'generalization_gap',
           'build_model', 'parameter_count', 'train', 'evaluate', 'checkpoint_save', 'checkpoint_load']
