/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attentionWeights: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const boundCurve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const etaCap: (a: number, b: number) => [number, number, number];
export const expectedSizes: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const marginalPath: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
