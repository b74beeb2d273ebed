"""Multi-resolution graph-convolutional surrogate models for
mesh-discretized structural dynamics."""

from .mesh import (Graph, Mesh, build_graph, estimate_lambda_max, load_mesh,
                   normalized_laplacian, scaled_laplacian, write_mesh)
from .coarsen import (Hierarchy, SelectionMatrix, build_hierarchy,
                      build_upsampler, compute_quadrics, downsample_states,
                      simplify)
from .datagen import (Dataset, ScenarioParams, halton, halton_sample,
                      make_benchmark, read_dataset, simulate, write_dataset)
from .surrogate import (Normalization, SurrogateLevel, TrainConfig,
                        TrainHistory, loss, pod_fit, pod_project,
                        pod_reconstruct, train, train_podnn)
from .refine import (RefinedSurrogate, level_contribution, lift_to_full,
                     surrogate_chain, train_next_level)
from .metrics import node_error, singular_spectrum, time_predictions

__version__ = "0.1.0"
