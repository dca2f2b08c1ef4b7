/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const flops_curve: (a: number, b: number, c: number) => [number, number, number, number];
export const merge_matrix: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const plan_counts: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
export const render_merge_map: (a: number, b: bigint, c: number, d: number, e: number) => [number, number, number, number];
export const shape_names: () => [number, number];
export const strip_height: (a: number) => number;
export const strip_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
