export * from './rng.js';
export * from './format.js';
export * from './manifest.js';
export * from './checkpoint.js';
export * from './data.js';
export * from './export.js';
