"""meder: Bangla medical entity classification.

Given a medical statement and an entity mention, predict the entity's
category with two transformer encoder branches fed complementary
sequence orderings ([CLS] text [SEP] entity [SEP] and the reverse),
their CLS vectors concatenated into a small classifier head.  The whole
stack (text cleanup, subword vocabulary, sequence packing, autodiff,
training, metrics) is implemented here from scratch at desk scale.
"""

__version__ = "0.1.0"
