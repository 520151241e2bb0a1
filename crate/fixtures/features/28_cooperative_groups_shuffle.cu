#include <cooperative_groups.h>
namespace cg = cooperative_groups;
__global__ void tile_sum(const float* x, float* out) {
    cg::thread_block_tile<32> tile = cg::tiled_partition<32>(cg::this_thread_block());
    float v = x[blockIdx.x * blockDim.x + threadIdx.x];
    for (int off = tile.size() / 2; off > 0; off /= 2) v += tile.shfl_down(v, off);
    if (tile.thread_rank() == 0) out[blockIdx.x * (blockDim.x / 32) + threadIdx.x / 32] = v;
}
