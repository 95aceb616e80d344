from .denoiser import AttentionControl, DenoiserDims, ToyDenoiser, substream
from .sampling import DivergenceError, Trajectory, ddim_denoise, ddim_invert
from .schedule import CLEAN, SchedulerParams, add_noise, ddim_step, make_schedule
from .text import PromptEmbedding, embed_prompt, load_lexicon, tokenize
from .train import noise_prediction_loss, train_toy
