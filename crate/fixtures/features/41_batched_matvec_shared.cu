#define TILE_K 64
__global__ void matvec(const float* __restrict__ A, const float* __restrict__ x, float* __restrict__ y, int rows, int cols) {
    __shared__ float xs[TILE_K];
    int r = blockIdx.x * blockDim.x + threadIdx.x;
    float acc = 0.0f;
    for (int k0 = 0; k0 < cols; k0 += TILE_K) {
        if (threadIdx.x < TILE_K && k0 + threadIdx.x < cols) xs[threadIdx.x] = x[k0 + threadIdx.x];
        __syncthreads();
        if (r < rows)
            for (int k = 0; k < TILE_K && k0 + k < cols; ++k) acc += A[r * cols + k0 + k] * xs[k];
        __syncthreads();
    }
    if (r < rows) y[r] = acc;
}
