/* tslint:disable */
/* eslint-disable */

export function attentionWeights(candidates: Float64Array, anchor: Float64Array, sigma: number, positive: boolean): Float64Array;

export function boundCurve(macfl: boolean, users: number, clusters: number, p_s: number, eta: number, kappa2: number, kappa1_max: number): Float64Array;

/**
 * Largest admissible learning rate (exclusive) for unit smoothness.
 */
export function etaCap(kappa1: number, kappa2: number): number;

export function expectedSizes(users: number, clusters: number, p_s: number, start: number, steps: number): Float64Array;

export function marginalPath(clusters: number, p_s: number, start: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attentionWeights: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly boundCurve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly etaCap: (a: number, b: number) => [number, number, number];
    readonly expectedSizes: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly marginalPath: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
