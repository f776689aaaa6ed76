from .registry import (
    UNKNOWN,
    UNKNOWN_NAME,
    ClassEntry,
    ClassEmbeddingRegistry,
    TaskSchedule,
    normalize,
    mean_known_embedding,
    pseudo_unknown_embedding,
    prompt_matrix,
    register_task,
)
from .io import GENERIC_KEY, save_embedding_file, load_embedding_file, registry_to_dict, registry_from_dict
