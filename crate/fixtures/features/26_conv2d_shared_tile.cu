#define BLOCK 16
#define KMAX 7
__global__ void conv2d_tiled(const float* __restrict__ in, const float* __restrict__ w, float* out, int H, int W, int K) {
    __shared__ float patch[BLOCK + KMAX - 1][BLOCK + KMAX - 1];
    int ox = blockIdx.x * BLOCK + threadIdx.x;
    int oy = blockIdx.y * BLOCK + threadIdx.y;
    for (int dy = threadIdx.y; dy < BLOCK + K - 1; dy += BLOCK)
        for (int dx = threadIdx.x; dx < BLOCK + K - 1; dx += BLOCK)
            patch[dy][dx] = in[min(blockIdx.y * BLOCK + dy, H - 1) * W + min(blockIdx.x * BLOCK + dx, W - 1)];
    __syncthreads();
    float acc = 0.0f;
    for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx)
            acc += patch[threadIdx.y + ky][threadIdx.x + kx] * w[ky * K + kx];
    if (oy < H - K + 1 && ox < W - K + 1) out[oy * (W - K + 1) + ox] = acc;
}
