from ldelab.synthdata.corpus import (CLEAN, ChannelConfig, FeatureSequence, GeneratorParams, SpeakerProfile,
                                     gen_population, gen_utterance, mixing_matrices, random_channel, utterance_seed)
from ldelab.synthdata.io import (Trial, read_features, read_trials, write_features, write_trials)
from ldelab.synthdata.preprocess import chunk_sample, energy_vad, preprocess, sliding_mean_norm

__all__ = ["CLEAN", "ChannelConfig", "FeatureSequence", "GeneratorParams", "SpeakerProfile", "gen_population",
           "gen_utterance", "mixing_matrices", "random_channel", "utterance_seed", "Trial", "read_features",
           "read_trials", "write_features", "write_trials", "chunk_sample", "energy_vad", "preprocess",
           "sliding_mean_norm"]
