__global__ void transpose_tile(const float* in, float* out) {
    __shared__ float tile[32][33];
    tile[threadIdx.y][threadIdx.x] = in[threadIdx.y * 32 + threadIdx.x];
    out[threadIdx.x * 32 + threadIdx.y] = tile[threadIdx.y][threadIdx.x];
}
