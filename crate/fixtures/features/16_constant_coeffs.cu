__constant__ float coeffs[16];
__global__ void poly(const float* x, float* y, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i >= n) return;
    float acc = 0.0f;
    #pragma unroll 4
    for (int k = 0; k < 16; ++k) acc = acc * x[i] + coeffs[k];
    y[i] = acc;
}
