from ._fcnn_test import fcnn_test
from ._oracles import (
    footprint, positive_network, random_spec, slim_spec,
)
from ._gradcheck import gradient_check, kink_signature, numerical_grad


__all__ = [
    'fcnn_test',
    'footprint',
    'gradient_check',
    'kink_signature',
    'numerical_grad',
    'positive_network',
    'random_spec',
    'slim_spec',
]
