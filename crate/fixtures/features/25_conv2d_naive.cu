__global__ void conv2d(const float* in, const float* w, float* out, int H, int W, int K) {
    int oy = blockIdx.y * blockDim.y + threadIdx.y;
    int ox = blockIdx.x * blockDim.x + threadIdx.x;
    int OH = H - K + 1, OW = W - K + 1;
    if (oy >= OH || ox >= OW) return;
    float acc = 0.0f;
    for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx)
            acc += in[(oy + ky) * W + ox + kx] * w[ky * K + kx];
    out[oy * OW + ox] = fmaxf(acc, 0.0f);
}
