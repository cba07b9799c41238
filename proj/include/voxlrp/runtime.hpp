#pragma once

namespace voxlrp {

/// Keeps large tensor buffers on the heap between training steps instead of
/// returning them to the OS after every batch. Process-wide; call once from main.
void tune_allocator();

}  // namespace voxlrp
