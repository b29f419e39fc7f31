"""FastAPI web adapter for the relocalization pose solver."""

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from typing import Optional
import sys
import os

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import CameraIntrinsics, Correspondence, RansacConfig, RelocError, ScenePose, pose_errors, ransac_pnp


# Constants
MAX_CORRESPONDENCES = 10000


# Request/Response models
class IntrinsicsModel(BaseModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(ge=1, le=16384)
    height: int = Field(ge=1, le=16384)


class CorrespondenceModel(BaseModel):
    pixel: tuple[float, float]
    world: tuple[float, float, float]
    confidence: float = Field(default=1.0, ge=0.0, le=1.0)


class RansacOptionsModel(BaseModel):
    iterations: int = Field(default=100, ge=1, le=100000)
    inlier_threshold_px: float = Field(default=3.0, gt=0)
    refine_iterations: int = Field(default=10, ge=0, le=1000)
    seed: int = 0


class LocalizeRequest(BaseModel):
    image_id: int = 0
    intrinsics: IntrinsicsModel
    correspondences: list[CorrespondenceModel]
    options: Optional[RansacOptionsModel] = None


class PoseModel(BaseModel):
    rotation: tuple[float, float, float, float]  # (w, x, y, z)
    translation: tuple[float, float, float]


class PoseErrorsRequest(BaseModel):
    estimate: PoseModel
    ground_truth: PoseModel


class LocalizeResponse(BaseModel):
    status: str
    pose_line: Optional[str] = None
    rotation: Optional[list[float]] = None
    translation: Optional[list[float]] = None
    inlier_mask: list[bool] = Field(default_factory=list)
    inlier_count: int = 0
    mean_error: Optional[float] = None
    error: Optional[dict] = None


class PoseErrorsResponse(BaseModel):
    translation_error: float
    rotation_error_deg: float


# Create FastAPI app
app = FastAPI(
    title="Keypoint Relocalization",
    description="Web API for robust camera pose estimation from 2D-3D correspondences",
    version="0.1.0",
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _intrinsics(model: IntrinsicsModel) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(model.fx, model.fy, model.cx, model.cy, model.width, model.height)
    except RelocError as e:
        raise HTTPException(status_code=400, detail=e.message)


@app.post("/api/localize", response_model=LocalizeResponse)
async def localize(request: LocalizeRequest):
    """Estimate a camera pose with P3P RANSAC and Gauss-Newton refinement.

    Args:
        request: Camera intrinsics, correspondences and RANSAC options

    Returns:
        Pose line, quaternion and translation, inlier mask and statistics,
        or the error that stopped localization
    """
    # Validate request size
    if len(request.correspondences) > MAX_CORRESPONDENCES:
        raise HTTPException(
            status_code=400,
            detail=f"Correspondence count exceeds limit of {MAX_CORRESPONDENCES}",
        )

    k = _intrinsics(request.intrinsics)
    opts = request.options or RansacOptionsModel()
    try:
        cfg = RansacConfig(
            iterations=opts.iterations,
            inlier_threshold_px=opts.inlier_threshold_px,
            refine_iterations=opts.refine_iterations,
            seed=opts.seed,
        )
        corrs = [Correspondence(c.pixel, c.world, c.confidence) for c in request.correspondences]
    except RelocError as e:
        raise HTTPException(status_code=400, detail=e.message)

    try:
        estimate = ransac_pnp(corrs, k, cfg)
    except RelocError as e:
        return {"status": "error", "error": e.to_error_info().to_dict()}

    return {"status": "ok", "pose_line": estimate.to_line(request.image_id), **estimate.to_dict()}


@app.post("/api/pose-errors", response_model=PoseErrorsResponse)
async def compare_poses(request: PoseErrorsRequest):
    """Camera-centre distance and rotation angle between two poses."""
    try:
        est = ScenePose.from_quaternion(request.estimate.rotation, request.estimate.translation)
        gt = ScenePose.from_quaternion(request.ground_truth.rotation, request.ground_truth.translation)
    except RelocError as e:
        raise HTTPException(status_code=400, detail=e.message)
    trans_err, rot_err = pose_errors(est, gt)
    return {"translation_error": trans_err, "rotation_error_deg": rot_err}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8080)
