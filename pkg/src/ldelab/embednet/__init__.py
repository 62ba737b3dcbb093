from ldelab.embednet.encoders import EncoderConfig, encode
from ldelab.embednet.margin import MarginConfig, classify_loss, margin_cos, psi, psi_op
from ldelab.embednet.model import Embedding, EmbeddingModel, ModelConfig
from ldelab.embednet.pooling import PoolingConfig, lde_as_sp, lde_pool, sp_pool

__all__ = ["EncoderConfig", "encode", "MarginConfig", "classify_loss", "margin_cos", "psi", "psi_op", "Embedding",
           "EmbeddingModel", "ModelConfig", "PoolingConfig", "lde_as_sp", "lde_pool", "sp_pool"]
