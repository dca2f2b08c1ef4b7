/* tslint:disable */
/* eslint-disable */

export function flops_curve(tokens: number, dim: number, depth: number): string;

/**
 * Merge and reconstruct matrices for a comma-separated score vector
 * (no class token), as JSON.
 */
export function merge_matrix(scores: string, prune: number, keep: number): string;

export function plan_counts(_class: number, seed: bigint, rate: number, tau: number): string;

/**
 * RGBA pixels of the three-panel strip.
 */
export function render_merge_map(_class: number, seed: bigint, rate: number, tau: number, scale: number): Uint8Array;

export function shape_names(): string;

export function strip_height(scale: number): number;

/**
 * Width in pixels of the three-panel strip (input, merge map, reconstruction).
 */
export function strip_width(scale: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly flops_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly merge_matrix: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly plan_counts: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
    readonly render_merge_map: (a: number, b: bigint, c: number, d: number, e: number) => [number, number, number, number];
    readonly shape_names: () => [number, number];
    readonly strip_height: (a: number) => number;
    readonly strip_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
