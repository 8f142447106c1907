#pragma once

#include "depthseq/volume.hpp"

namespace depthseq {

inline constexpr double kDefaultSkullHu = 300.0;

struct SplitPlane {
  Vec3 point{0.0, 0.0, 0.0};
  Vec3 normal{1.0, 0.0, 0.0};
};

struct HemisphereResult {
  BinaryMask left;
  BinaryMask right;
};

enum class Connectivity { Six = 6, TwentySix = 26 };

BinaryMask threshold_mask(const Volume& v, double hu_min);

// Keeps the largest connected component; ties go to the component whose
// smallest linear voxel index is lowest. Throws ValidationError("no components")
// on an empty mask.
BinaryMask largest_component(const BinaryMask& m, Connectivity connectivity = Connectivity::TwentySix);

// Per axial slice: background not 4-connected to the slice border becomes foreground.
BinaryMask fill_holes(const BinaryMask& m);

// Mean world position (mm) of the set voxels.
Vec3 centroid(const BinaryMask& m, const Volume& v);

// Midsagittal plane through `c` with the image row direction as normal.
SplitPlane plane_from_orientation(const Vec3& c, const Volume& v);

// Right iff (world - point) . normal > 0; ties go left.
HemisphereResult split_by_plane(const Volume& v, const SplitPlane& p);

struct HemisplitOptions {
  double hu_min = kDefaultSkullHu;
  Connectivity connectivity = Connectivity::TwentySix;
};

// threshold -> largest component -> fill holes -> centroid -> plane -> split.
HemisphereResult separate_hemispheres(const Volume& v, const HemisplitOptions& opts = {});
// Same pipeline, also reporting the plane it used.
HemisphereResult separate_hemispheres(const Volume& v, const HemisplitOptions& opts, SplitPlane* plane);

}  // namespace depthseq
