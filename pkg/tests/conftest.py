import numpy as np
import pytest

from qualseg.data import SliceRecord, SyntheticSpec, generate_synthetic_stack


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        n_stacks=1, slices_per_stack=12, image_size=32,
        lesion_radius_range=(2, 4), lesion_count_range=(1, 2), seed=11,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate_synthetic_stack(tiny_spec)


def make_record(image, roi=None, annotation=None, stack="s", index=0, split="pool"):
    image = np.asarray(image, dtype=np.float64)
    return SliceRecord(
        stack_id=stack,
        slice_index=index,
        image=image,
        roi_mask=None if roi is None else np.asarray(roi, dtype=np.uint8),
        annotation=None if annotation is None else np.asarray(annotation, dtype=np.uint8),
        split=split,
    )
