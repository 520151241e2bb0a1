__inline__ __device__ float warp_sum(float v) {
    for (int off = 16; off > 0; off >>= 1) v += __shfl_down_sync(0xffffffff, v, off);
    return v;
}
__global__ void row_sum(const float* x, float* out, int cols) {
    float acc = 0.0f;
    for (int c = threadIdx.x; c < cols; c += 32) acc += x[blockIdx.x * cols + c];
    acc = warp_sum(acc);
    if (threadIdx.x == 0) out[blockIdx.x] = acc;
}
void launch(const float* x, float* out, int rows, int cols) {
    row_sum<<<rows, 32>>>(x, out, cols);
}
