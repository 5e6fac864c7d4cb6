/**
 * Reference forward/backward tensors per layer kind, computed with tfjs
 * ops and autodiff.  Layer conventions the stock tfjs kernels do not pin
 * down (cross-channel normalization with alpha/depth, inverted dropout
 * with the engine's seeded mask, biased batchnorm statistics with
 * convex running updates) are spelled out here so the goldens test this
 * project's contract rather than a third-party default.
 */

import * as tf from "@tensorflow/tfjs";
import { Record } from "./binio";
import { Rng } from "./rng";

export interface CaseSpec {
  name: string;
  kind: string;
  seed: number;
  input: number[];
  tolerance?: number;
  // conv
  out_channels?: number;
  kernel?: number;
  stride?: number;
  pad?: number;
  weight_std?: number;
  // maxpool
  window?: number;
  // lrn
  depth?: number;
  k?: number;
  alpha?: number;
  beta?: number;
  // batchnorm
  mode?: string;
  epsilon?: number;
  stat_momentum?: number;
  // fc
  out_features?: number;
  // softmax
  labels?: number[];
  // dropout
  rate?: number;
  mask_seed?: number;
}

function rec(name: string, t: tf.Tensor): Record {
  return { name, dims: t.shape.slice(), data: t.dataSync() as Float32Array };
}

function tensorFrom(rng: Rng, shape: number[], std = 1.0, mean = 0.0): tf.Tensor {
  const count = shape.reduce((a, b) => a * b, 1);
  return tf.tensor(rng.normalsF32(count, std, mean), shape, "float32");
}

function convCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const [n, h, w, cIn] = spec.input;
  const kk = spec.kernel!;
  const cOut = spec.out_channels!;
  const stride = spec.stride ?? 1;
  const pad = spec.pad ?? 0;
  const x = tensorFrom(rng, spec.input);
  const weights = tensorFrom(rng, [kk, kk, cIn, cOut], spec.weight_std ?? 0.1);
  const bias = tensorFrom(rng, [cOut]);

  const forward = (xi: tf.Tensor, wi: tf.Tensor, bi: tf.Tensor) => {
    const padded = pad > 0
      ? tf.pad(xi, [[0, 0], [pad, pad], [pad, pad], [0, 0]])
      : xi;
    return tf.add(tf.conv2d(padded as tf.Tensor4D, wi as tf.Tensor4D,
      [stride, stride], "valid"), bi);
  };
  const out = forward(x, weights, bias);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx, gw, gb] = tf.grads(forward)([x, weights, bias], gout);
  return [
    rec("input", x), rec("weights", weights), rec("bias", bias),
    rec("forward", out), rec("grad_output", gout), rec("grad_input", gx),
    rec("grad_weights", gw), rec("grad_bias", gb),
  ];
}

function maxpoolCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const x = tensorFrom(rng, spec.input);
  const windowSize = spec.window!;
  const stride = spec.stride ?? windowSize;
  const forward = (xi: tf.Tensor) =>
    tf.maxPool(xi as tf.Tensor4D, [windowSize, windowSize], [stride, stride], "valid");
  const out = forward(x);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx] = tf.grads(forward)([x], gout);
  return [rec("input", x), rec("forward", out), rec("grad_output", gout),
          rec("grad_input", gx)];
}

function lrnCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const x = tensorFrom(rng, spec.input);
  const depth = spec.depth!;
  const k = spec.k!;
  const alpha = spec.alpha!;
  const beta = spec.beta!;
  const half = (depth - 1) / 2;
  const forward = (xi: tf.Tensor) => {
    const sq = tf.square(xi);
    const padded = tf.pad(sq, [[0, 0], [0, 0], [0, 0], [half, half]]);
    let windowSum = tf.zerosLike(xi);
    for (let j = 0; j < depth; j++) {
      const slice = tf.slice(padded, [0, 0, 0, j], xi.shape.slice());
      windowSum = tf.add(windowSum, slice);
    }
    const scale = tf.add(tf.scalar(k), tf.mul(tf.scalar(alpha / depth), windowSum));
    return tf.mul(xi, tf.pow(scale, tf.scalar(-beta)));
  };
  const out = forward(x);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx] = tf.grads(forward)([x], gout);
  return [rec("input", x), rec("forward", out), rec("grad_output", gout),
          rec("grad_input", gx)];
}

function batchnormCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const channels = spec.input[3];
  const eps = spec.epsilon ?? 1e-5;
  const sm = spec.stat_momentum ?? 0.1;
  const x = tensorFrom(rng, spec.input);
  const gamma = tensorFrom(rng, [channels], 0.3, 1.0);
  const beta = tensorFrom(rng, [channels]);
  const runningMean = tensorFrom(rng, [channels], 0.5);
  // keep variances strictly positive
  const rvRaw = rng.uniforms(channels);
  const runningVar = tf.tensor(
    Float32Array.from(rvRaw, (u) => Math.fround(0.5 + u)), [channels], "float32");

  if (spec.mode === "eval") {
    const forward = (xi: tf.Tensor, g: tf.Tensor, b: tf.Tensor) =>
      tf.add(tf.mul(g, tf.div(tf.sub(xi, runningMean),
        tf.sqrt(tf.add(runningVar, tf.scalar(eps))))), b);
    const out = forward(x, gamma, beta);
    return [rec("input", x), rec("gamma", gamma), rec("beta", beta),
            rec("running_mean", runningMean), rec("running_var", runningVar),
            rec("forward", out)];
  }

  const forward = (xi: tf.Tensor, g: tf.Tensor, b: tf.Tensor) => {
    const mu = tf.mean(xi, [0, 1, 2]);
    const variance = tf.mean(tf.square(tf.sub(xi, mu)), [0, 1, 2]);
    const xhat = tf.div(tf.sub(xi, mu), tf.sqrt(tf.add(variance, tf.scalar(eps))));
    return tf.add(tf.mul(g, xhat), b);
  };
  const out = forward(x, gamma, beta);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx, gGamma, gBeta] = tf.grads(forward)([x, gamma, beta], gout);
  const mu = tf.mean(x, [0, 1, 2]);
  const variance = tf.mean(tf.square(tf.sub(x, mu)), [0, 1, 2]);
  const newMean = tf.add(tf.mul(tf.scalar(1 - sm), runningMean), tf.mul(tf.scalar(sm), mu));
  const newVar = tf.add(tf.mul(tf.scalar(1 - sm), runningVar),
    tf.mul(tf.scalar(sm), variance));
  return [
    rec("input", x), rec("gamma", gamma), rec("beta", beta),
    rec("running_mean", runningMean), rec("running_var", runningVar),
    rec("forward", out), rec("grad_output", gout), rec("grad_input", gx),
    rec("grad_gamma", gGamma), rec("grad_beta", gBeta),
    rec("new_running_mean", newMean), rec("new_running_var", newVar),
  ];
}

function fcCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const [n] = spec.input;
  const inFeatures = spec.input.slice(1).reduce((a, b) => a * b, 1);
  const outFeatures = spec.out_features!;
  const x = tensorFrom(rng, spec.input);
  const weights = tensorFrom(rng, [inFeatures, outFeatures], 0.1);
  const bias = tensorFrom(rng, [outFeatures]);
  const forward = (xi: tf.Tensor, wi: tf.Tensor, bi: tf.Tensor) =>
    tf.reshape(tf.add(tf.matMul(tf.reshape(xi, [n, inFeatures]), wi as tf.Tensor2D), bi),
      [n, 1, 1, outFeatures]);
  const out = forward(x, weights, bias);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx, gw, gb] = tf.grads(forward)([x, weights, bias], gout);
  return [
    rec("input", x), rec("weights", weights), rec("bias", bias),
    rec("forward", out), rec("grad_output", gout), rec("grad_input", gx),
    rec("grad_weights", gw), rec("grad_bias", gb),
  ];
}

function softmaxCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const [n, , , kClasses] = spec.input;
  const labels = spec.labels!;
  const x = tensorFrom(rng, spec.input);
  const onehot = tf.oneHot(tf.tensor1d(labels, "int32"), kClasses).cast("float32");
  const forward = (xi: tf.Tensor) => {
    const z = tf.reshape(xi, [n, kClasses]);
    const logp = tf.sub(z, tf.logSumExp(z, 1, true));
    return tf.neg(tf.mean(tf.sum(tf.mul(logp, onehot), 1)));
  };
  const loss = forward(x);
  const probs = tf.reshape(
    tf.softmax(tf.reshape(x, [n, kClasses]), 1), [n, 1, 1, kClasses]);
  const [gx] = tf.grads(forward)([x]);
  return [
    rec("input", x),
    { name: "labels", dims: [n], data: Float32Array.from(labels) },
    rec("loss", tf.reshape(loss, [1])), rec("probs", probs),
    rec("grad_input", gx),
  ];
}

function dropoutCase(spec: CaseSpec): Record[] {
  const rng = new Rng(spec.seed);
  const rate = spec.rate!;
  const count = spec.input.reduce((a, b) => a * b, 1);
  const x = tensorFrom(rng, spec.input);
  const u = new Rng(spec.mask_seed!).uniforms(count);
  const keepScale = Math.fround(1 / (1 - rate));
  const maskData = Float32Array.from(u, (v) => (v >= rate ? keepScale : 0));
  const mask = tf.tensor(maskData, spec.input, "float32");
  const forward = (xi: tf.Tensor) => tf.mul(xi, mask);
  const out = forward(x);
  const gout = tensorFrom(rng, out.shape.slice());
  const [gx] = tf.grads(forward)([x], gout);
  return [rec("input", x), rec("forward", out), rec("grad_output", gout),
          rec("grad_input", gx)];
}

const GENERATORS: { [kind: string]: (spec: CaseSpec) => Record[] } = {
  conv: convCase,
  maxpool: maxpoolCase,
  lrn: lrnCase,
  batchnorm: batchnormCase,
  fc: fcCase,
  softmax_xent: softmaxCase,
  dropout: dropoutCase,
};

export function generateCase(spec: CaseSpec): Record[] {
  const generator = GENERATORS[spec.kind];
  if (!generator) {
    throw new Error(`unsupported layer kind '${spec.kind}' in case '${spec.name}'`);
  }
  // records hold detached Float32Arrays, so the tensors can all be freed
  tf.engine().startScope();
  try {
    return generator(spec);
  } finally {
    tf.engine().endScope();
  }
}
