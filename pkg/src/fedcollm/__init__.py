"""fedcollm: desk-scale federated co-tuning of a server language model and
client small language models via low-rank adapters, mutual distillation,
and privacy-preserving masked aggregation."""

from .data import Corpus, FederatedSplit, McqInstance, load_corpus, make_mcq_set, make_synthetic_corpus, partition
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FedCoLLMError,
    InputError,
    NumericError,
    ProtocolError,
)
from .federation import (
    ClientState,
    FederationConfig,
    RoundTranscript,
    RunResult,
    ServerState,
    aggregate,
    client_update,
    mutual_transfer,
    run_fedcollm,
)
from .lora import LoraAdapterSet, LoraConfig, adapter_delta, count_transmitted_params, flatten, new_adapters, unflatten
from .losses import DistillWeights, ft_loss, kd_loss, server_losses, task_loss
from .model import LanguageModel, ModelConfig, forward, init_model, param_count, perplexity, score_choices
from .secagg import MaskedShare, PairwiseSeeds, dequantize, mask_update, quantize, secure_aggregate
from .tensor import Tensor, backward, no_grad, sgd_step

__version__ = "0.1.0"
