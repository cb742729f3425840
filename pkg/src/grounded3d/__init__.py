"""Grounded scene captions, referent-token instruction data, alignment losses
and grounding/captioning metrics for 3D scenes."""

from .scene import Box3, InstanceAnnotation, PointCloud, Scene, Vec3, box_iou, mask_iou
from .markup import GroundedCaption, PhraseCorrespondence, parse_grounded_markup, serialize_grounded_markup
from .alignment import clasp_loss, hungarian_match
from .instructions import InstructionSample, TaskKind, TemplateLibrary, convert_task, render_dialogue
from .config import Config

__version__ = "0.1.0"

__all__ = [
    "Box3", "Config", "GroundedCaption", "InstanceAnnotation", "InstructionSample", "PhraseCorrespondence",
    "PointCloud", "Scene", "TaskKind", "TemplateLibrary", "Vec3", "box_iou", "clasp_loss", "convert_task",
    "hungarian_match", "mask_iou", "parse_grounded_markup", "render_dialogue", "serialize_grounded_markup",
]
