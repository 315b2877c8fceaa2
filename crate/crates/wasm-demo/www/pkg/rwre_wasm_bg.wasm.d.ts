/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const calibrate: (a: number, b: number) => [number, number];
export const quenched: (a: number, b: number, c: number, d: number) => [number, number];
export const walk: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
