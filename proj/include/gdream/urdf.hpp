#pragma once

#include <string>

#include "gdream/skeleton.hpp"

namespace gdream {

/// Reads the revolute skeleton of a URDF document.
///
/// Supported joint types are revolute, continuous (treated as revolute),
/// fixed (merged into the parent, offsets composed) and at most one floating
/// joint attached to the root link, whose child then becomes the base.
/// Geometry is expressed in the base frame at zero pose: `axes[j]` is the URDF
/// axis rotated by every origin rotation down to joint j, and
/// `link_vectors[j]` is the zero-pose offset between joint origins. The
/// result carries no key joints; attach them with `with_key_joints`.
SkeletonGraph parse_urdf(const std::string& urdf_text);

SkeletonGraph parse_urdf_file(const std::string& path);

}  // namespace gdream
