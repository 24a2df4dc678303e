from .augment import AugmentConfig, augment, normalize, to_input
from .batching import Batch, make_batches, plan_batches
from .buckets import Bucket, BucketTable, group_resize, resize_bilinear
from .io import ManifestError, ingest_manifest, read_image, read_pgm, write_pgm, write_split
from .synth import (
    DatasetConfig,
    Sample,
    ScriptSet,
    flip_pair,
    generate_dataset,
    generate_split,
    is_hard,
)


def resize_samples(samples, table=None):
    """Group-resize every sample image (returns new Sample objects)."""
    return [Sample(group_resize(s.image, table), s.label, s.meta, s.path) for s in samples]
